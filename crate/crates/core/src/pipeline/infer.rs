use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::Deployment;
use crate::error::{Error, Result};
use crate::io::{ensure_dir, read_f32_le, read_json, write_f32_le, write_json};
use crate::metrics::MetricsReport;
use crate::shred::{augment_training_padding, ShredMode, ShredModel};
use crate::sim::{FieldSequence, Provenance};
use crate::temporal::{Direction, TemporalModel};
use crate::tensor::Tensor;

/// Raw sensor readings over a contiguous block of frames. Carries no field
/// data, so inference cannot see ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorWindow {
    values: Tensor<f32>,
    start: usize,
}

impl SensorWindow {
    /// `values` is `[W+1, p]` for frames `start..start+W+1`.
    pub fn new(values: Tensor<f32>, start: usize) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() == 0 {
            return Err(Error::config("sensor window needs at least one frame"));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("sensor window".into()));
        }
        Ok(SensorWindow { values, start })
    }

    /// The last `frames` rows of a sensor series.
    pub fn terminal(series: &Tensor<f32>, frames: usize) -> Result<Self> {
        let start = series
            .rows()
            .checked_sub(frames)
            .ok_or_else(|| Error::config("window longer than series"))?;
        Self::new(series.slice_rows(start, series.rows())?, start)
    }

    /// The first `frames` rows of a sensor series.
    pub fn initial(series: &Tensor<f32>, frames: usize) -> Result<Self> {
        Self::new(series.slice_rows(0, frames.min(series.rows()).max(1))?, 0)
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }
}

/// Frame-mode encoders see only the window (first row replicated into the
/// lag); sequence encoders see the window plus `padding` terminal copies when
/// the window ends the trajectory. Returns `[W+1, d_z]`.
pub fn observed_latents(
    shred: &ShredModel,
    deployment: &Deployment,
    window: &SensorWindow,
    direction: Direction,
    padding: usize,
) -> Result<Tensor<f32>> {
    let norm = shred
        .normalization
        .as_ref()
        .ok_or_else(|| Error::config("SHRED model has no normalization"))?;
    if window.values.cols() != deployment.layout.len() {
        return Err(Error::config(format!(
            "window has {} sensors, layout has {}",
            window.values.cols(),
            deployment.layout.len()
        )));
    }
    let series = norm.normalize_sensors(&window.values, &deployment.layout);
    let rows = series.rows();
    if shred.mode() == ShredMode::Seq2seq && direction == Direction::Backward && padding > 0 {
        let z = shred.encode(&augment_training_padding(&series, padding)?)?;
        return z.slice_rows(0, rows);
    }
    shred.encode(&series)
}

/// Decoded, denormalized states with masked cells zeroed.
pub(crate) fn decode_states(shred: &ShredModel, deployment: &Deployment, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
    if latents.rows() == 0 {
        return Ok(Tensor::zeros(&[0, deployment.state_width()]));
    }
    let norm = shred
        .normalization
        .as_ref()
        .ok_or_else(|| Error::config("SHRED model has no normalization"))?;
    let mut states = norm.denormalize_states(&shred.decode(latents)?);
    if let Some(mask) = &deployment.mask {
        let cells = mask.len();
        let n = states.cols();
        for (k, v) in states.data_mut().iter_mut().enumerate() {
            if mask[(k % n) % cells] {
                *v = 0.0;
            }
        }
    }
    Ok(states)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub reconstruction: FieldSequence,
    /// `[T+1, d_z]` in trajectory order.
    pub latents: Tensor<f32>,
    /// `observed[t]` marks frames decoded from encoder latents.
    pub observed: Vec<bool>,
    pub metrics: Option<MetricsReport>,
    pub seconds: f64,
}

impl InferenceResult {
    pub fn generated_frames(&self) -> usize {
        self.observed.iter().filter(|&&o| !o).count()
    }

    /// Attach metrics against a reference trajectory.
    pub fn evaluate(&mut self, truth: &FieldSequence, with_ssim: bool) -> Result<&MetricsReport> {
        let report = MetricsReport::compute(&self.reconstruction.frames, truth, Some(&self.observed), with_ssim)?;
        Ok(self.metrics.insert(report))
    }

    /// Writes `result.json`, `reconstruction.bin`, `latents.bin` and, when
    /// present, `metrics.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_f32_le(&dir.join("reconstruction.bin"), self.reconstruction.frames.data())?;
        write_f32_le(&dir.join("latents.bin"), self.latents.data())?;
        let r = &self.reconstruction;
        write_json(
            &dir.join("result.json"),
            &ResultManifest {
                frames: r.num_frames(),
                width: r.width(),
                latent_dim: self.latents.cols(),
                grid_shape: r.grid_shape.clone(),
                channels: r.channels.clone(),
                dt_save: r.dt_save,
                mask: r.mask.clone(),
                provenance: r.provenance.clone(),
                observed: self.observed.clone(),
                seconds: self.seconds,
            },
        )?;
        if let Some(m) = &self.metrics {
            m.write_json(&dir.join("metrics.json"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: ResultManifest = read_json(&dir.join("result.json"))?;
        let frames = Tensor::new(
            vec![m.frames, m.width],
            read_f32_le(&dir.join("reconstruction.bin"), m.frames * m.width)?,
        )?;
        let latents = Tensor::new(
            vec![m.frames, m.latent_dim],
            read_f32_le(&dir.join("latents.bin"), m.frames * m.latent_dim)?,
        )?;
        let metrics_path = dir.join("metrics.json");
        let metrics = if metrics_path.exists() {
            Some(read_json(&metrics_path)?)
        } else {
            None
        };
        Ok(InferenceResult {
            reconstruction: FieldSequence::new(frames, m.grid_shape, m.channels, m.dt_save, m.mask, m.provenance)?,
            latents,
            observed: m.observed,
            metrics,
            seconds: m.seconds,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ResultManifest {
    frames: usize,
    width: usize,
    latent_dim: usize,
    grid_shape: Vec<usize>,
    channels: Vec<crate::sim::Channel>,
    dt_save: f64,
    mask: Option<Vec<bool>>,
    provenance: Provenance,
    observed: Vec<bool>,
    seconds: f64,
}

fn assemble(shred: &ShredModel, deployment: &Deployment, parts: [(&Tensor<f32>, bool); 2], started: Instant) -> Result<InferenceResult> {
    let mut states = Vec::new();
    let mut latents = Vec::new();
    let mut observed = Vec::new();
    for (z, obs) in parts {
        if z.rows() == 0 {
            continue;
        }
        // Each segment is decoded on its own so the observed frames match a
        // plain reconstruction of the window bit for bit.
        states.push(decode_states(shred, deployment, z)?);
        latents.push(z.clone());
        observed.extend(std::iter::repeat_n(obs, z.rows()));
    }
    let states = Tensor::vstack(&states.iter().collect::<Vec<_>>())?;
    let latents = Tensor::vstack(&latents.iter().collect::<Vec<_>>())?;
    Ok(InferenceResult {
        reconstruction: deployment.field_sequence(states)?,
        latents,
        observed,
        metrics: None,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Plain SHRED reconstruction of the window frames alone.
pub fn reconstruct_window(
    shred: &ShredModel,
    deployment: &Deployment,
    window: &SensorWindow,
    direction: Direction,
    padding: usize,
) -> Result<InferenceResult> {
    let started = Instant::now();
    let z = observed_latents(shred, deployment, window, direction, padding)?;
    let empty = Tensor::zeros(&[0, z.cols()]);
    assemble(shred, deployment, [(&z, true), (&empty, false)], started)
}

/// Full `total`-frame reconstruction from a terminal window: generated
/// latents for frames `0..total−(W+1)`, encoder latents for the rest.
pub fn infer_backward(
    shred: &ShredModel,
    temporal: &TemporalModel,
    deployment: &Deployment,
    window: &SensorWindow,
    total: usize,
    padding: usize,
) -> Result<InferenceResult> {
    let started = Instant::now();
    let observed = window.len();
    if observed > total {
        return Err(Error::config("window longer than the trajectory"));
    }
    let z_obs = observed_latents(shred, deployment, window, Direction::Backward, padding)?;
    let generated = match (total - observed, temporal) {
        (0, _) => Tensor::zeros(&[0, z_obs.cols()]),
        (t_out, TemporalModel::Seq2seq(m)) => {
            if m.config.direction != Direction::Backward {
                return Err(Error::config("temporal model was trained for forward inference"));
            }
            m.generate(&z_obs, t_out)?
        }
        (_, TemporalModel::Ar(_)) => return Err(Error::config("the AR model only runs forward")),
    };
    assemble(shred, deployment, [(&generated, false), (&z_obs, true)], started)
}

/// The window followed by `horizon` generated frames.
pub fn infer_forward(
    shred: &ShredModel,
    temporal: &TemporalModel,
    deployment: &Deployment,
    window: &SensorWindow,
    horizon: usize,
) -> Result<InferenceResult> {
    let started = Instant::now();
    let z_obs = observed_latents(shred, deployment, window, Direction::Forward, 0)?;
    let generated = match (horizon, temporal) {
        (0, _) => Tensor::zeros(&[0, z_obs.cols()]),
        (_, TemporalModel::Seq2seq(m)) => {
            if m.config.direction != Direction::Forward {
                return Err(Error::config("temporal model was trained for backward inference"));
            }
            m.generate(&z_obs, horizon)?
        }
        (_, TemporalModel::Ar(m)) => {
            let norm = m.normalizer.as_ref().ok_or_else(|| Error::config("AR model has no normalizer"))?;
            let w = m.config.window;
            if z_obs.rows() < w {
                return Err(Error::config(format!("AR lookback {w} exceeds the {}-frame window", z_obs.rows())));
            }
            let seed = norm.normalize(&z_obs.slice_rows(z_obs.rows() - w, z_obs.rows())?);
            norm.denormalize(&m.ar_rollout(&seed, horizon)?)
        }
    };
    assemble(shred, deployment, [(&z_obs, true), (&generated, false)], started)
}
