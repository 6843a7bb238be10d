//! End-to-end orchestration: two-stage training on an ensemble, and
//! deployment-time inference from sensor windows alone.
//!
//! Stage i trains and freezes SHRED, writes it to disk and reloads it. Stage
//! ii trains the temporal model on latents computed once from the reloaded
//! encoder and cached next to it.
//!
//! Temporal-model inputs are encoded the way deployment encodes them: the
//! observed sensor window on its own. Targets are latents of the full
//! training trajectories.

mod config;
mod infer;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, ShredSection, TemporalSection};
pub use infer::{infer_backward, infer_forward, observed_latents, reconstruct_window, InferenceResult, SensorWindow};

use crate::error::{Error, Result};
use crate::io::{ensure_dir, read_f32_le, read_json, write_f32_le, write_json};
use crate::metrics::MetricsReport;
use crate::sensing::{simulate_ensemble, EnsembleDataset, Member, SensorLayout, Split};
use crate::shred::{train_shred, History, ShredConfig, ShredModel, ShredSample};
use crate::sim::{Channel, FieldSequence, Provenance, System};
use crate::temporal::{
    build_ar_dataset, train_ar, train_seq2seq, ARModel, ArConfig, ArDataset, Direction, LatentNormalizer, Seq2SeqConfig, Seq2SeqExample,
    Seq2SeqTemporalModel, TemporalKind, TemporalModel,
};
use crate::tensor::Tensor;

/// What a deployed model needs besides sensor values: where the sensors sit
/// and how to lay out the reconstructed state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub system: System,
    pub layout: SensorLayout,
    pub grid_shape: Vec<usize>,
    pub channels: Vec<Channel>,
    pub mask: Option<Vec<bool>>,
    pub dt_save: f64,
    /// Trajectory length `T+1` the models were trained for.
    pub total_frames: usize,
}

impl Deployment {
    pub fn from_dataset(ds: &EnsembleDataset) -> Self {
        let f = &ds.members[0].fields;
        Deployment {
            system: ds.system,
            layout: ds.layout.clone(),
            grid_shape: f.grid_shape.clone(),
            channels: f.channels.clone(),
            mask: f.mask.clone(),
            dt_save: f.dt_save,
            total_frames: f.num_frames(),
        }
    }

    pub fn state_width(&self) -> usize {
        self.grid_shape.iter().product::<usize>() * self.channels.len()
    }

    pub(crate) fn field_sequence(&self, frames: Tensor<f32>) -> Result<FieldSequence> {
        FieldSequence::new(
            frames,
            self.grid_shape.clone(),
            self.channels.clone(),
            self.dt_save,
            self.mask.clone(),
            Provenance {
                system: self.system,
                seed: 0,
                params: Default::default(),
            },
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub shred: History,
    pub temporal: History,
    /// Dataset member indices read during training.
    pub members_used: Vec<usize>,
    pub seconds: f64,
}

/// Frozen SHRED, temporal model and deployment metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedPipeline {
    pub config: ExperimentConfig,
    pub shred: ShredModel,
    pub temporal: TemporalModel,
    pub deployment: Deployment,
}

impl TrainedPipeline {
    /// `dir/{config.toml, deployment.json, shred/, temporal/}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        self.config.save(&dir.join("config.toml"))?;
        write_json(&dir.join("deployment.json"), &self.deployment)?;
        self.shred.save(&dir.join("shred"))?;
        self.save_temporal(dir)
    }

    fn save_temporal(&self, dir: &Path) -> Result<()> {
        let t = &self.config.temporal.train;
        self.temporal.save(&dir.join("temporal"), (t.lambda_recon, t.lambda_shape))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(TrainedPipeline {
            config: ExperimentConfig::load(&dir.join("config.toml"))?,
            shred: ShredModel::load(&dir.join("shred"))?,
            temporal: TemporalModel::load(&dir.join("temporal"))?,
            deployment: read_json(&dir.join("deployment.json"))?,
        })
    }

    /// Inference from the window a deployment would observe, in the
    /// configured direction.
    pub fn infer(&self, window: &SensorWindow) -> Result<InferenceResult> {
        let total = self.deployment.total_frames;
        match self.config.direction {
            Direction::Backward => infer_backward(&self.shred, &self.temporal, &self.deployment, window, total, self.config.padding),
            Direction::Forward => infer_forward(
                &self.shred,
                &self.temporal,
                &self.deployment,
                window,
                self.config.generated_frames(total),
            ),
        }
    }

    /// The configured observation window of a sensor series.
    pub fn window_of(&self, sensors: &Tensor<f32>) -> Result<SensorWindow> {
        let w = self.config.observed_frames(self.deployment.total_frames);
        match self.config.direction {
            Direction::Backward => SensorWindow::terminal(sensors, w),
            Direction::Forward => SensorWindow::initial(sensors, w),
        }
    }

    /// Plain SHRED over the full sensor series.
    pub fn reconstruct_full(&self, sensors: &Tensor<f32>) -> Result<InferenceResult> {
        reconstruct_window(
            &self.shred,
            &self.deployment,
            &SensorWindow::new(sensors.clone(), 0)?,
            Direction::Forward,
            0,
        )
    }
}

fn shred_samples(ds: &EnsembleDataset, members: &[&Member]) -> Vec<ShredSample> {
    let weights = ds.mask().map(|_| members[0].fields.weights());
    members
        .iter()
        .map(|m| ShredSample {
            sensors: ds.normalized_sensors(m),
            target: ds.normalized_fields(m),
            weights: weights.clone(),
        })
        .collect()
}

/// Encoder latents of one member: the full trajectory and its observed window.
struct CachedLatents {
    full: Tensor<f32>,
    observed: Tensor<f32>,
}

fn cache_latents(shred: &ShredModel, deployment: &Deployment, cfg: &ExperimentConfig, members: &[&Member]) -> Result<Vec<CachedLatents>> {
    let total = deployment.total_frames;
    let w = cfg.observed_frames(total);
    let norm = shred.normalization.as_ref().expect("normalization attached");
    members
        .par_iter()
        .map(|m| {
            let full = shred.encode(&norm.normalize_sensors(&m.sensors, &deployment.layout))?;
            let window = match cfg.direction {
                Direction::Backward => SensorWindow::terminal(&m.sensors, w)?,
                Direction::Forward => SensorWindow::initial(&m.sensors, w)?,
            };
            let observed = observed_latents(shred, deployment, &window, cfg.direction, cfg.padding)?;
            Ok(CachedLatents { full, observed })
        })
        .collect()
}

fn write_cache(dir: &Path, cache: &[CachedLatents]) -> Result<()> {
    ensure_dir(dir)?;
    for (k, c) in cache.iter().enumerate() {
        write_f32_le(&dir.join(format!("full_{k}.bin")), c.full.data())?;
        write_f32_le(&dir.join(format!("observed_{k}.bin")), c.observed.data())?;
    }
    Ok(())
}

fn read_cache(dir: &Path, shapes: &[(usize, usize, usize)]) -> Result<Vec<CachedLatents>> {
    shapes
        .iter()
        .enumerate()
        .map(|(k, &(full, obs, d))| {
            Ok(CachedLatents {
                full: Tensor::new(vec![full, d], read_f32_le(&dir.join(format!("full_{k}.bin")), full * d)?)?,
                observed: Tensor::new(vec![obs, d], read_f32_le(&dir.join(format!("observed_{k}.bin")), obs * d)?)?,
            })
        })
        .collect()
}

fn seq2seq_examples(cfg: &ExperimentConfig, total: usize, cache: &[CachedLatents]) -> Result<Vec<Seq2SeqExample>> {
    let w = cfg.observed_frames(total);
    let t_out = cfg.generated_frames(total);
    cache
        .iter()
        .map(|c| {
            let target = match cfg.direction {
                Direction::Backward => c.full.slice_rows(0, t_out)?,
                Direction::Forward => {
                    if w + t_out > total {
                        return Err(Error::config("forward horizon runs past the training trajectories"));
                    }
                    c.full.slice_rows(w, w + t_out)?
                }
            };
            Ok(Seq2SeqExample {
                observed: c.observed.clone(),
                target,
            })
        })
        .collect()
}

/// Stage i then stage ii on the training and validation members, with
/// artifacts written under `dir`. The ground-truth member is never read.
pub fn train_all(cfg: &ExperimentConfig, ds: &EnsembleDataset, dir: &Path) -> Result<(TrainedPipeline, TrainReport)> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let train = ds.training();
    let val = ds.validation();
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("training needs at least one training and one validation member"));
    }
    let deployment = Deployment::from_dataset(ds);
    let total = deployment.total_frames;
    if train.iter().chain(&val).any(|m| m.fields.num_frames() != total) {
        return Err(Error::config("training members differ in length"));
    }
    let mut report = TrainReport {
        members_used: train.iter().chain(&val).map(|m| m.index).collect(),
        ..Default::default()
    };
    ensure_dir(dir)?;
    cfg.save(&dir.join("config.toml"))?;
    write_json(&dir.join("deployment.json"), &deployment)?;

    // Stage i.
    let s = &cfg.shred;
    let shred_cfg = ShredConfig {
        mode: s.mode,
        sensors: ds.layout.len(),
        state_width: ds.state_width(),
        hidden: s.hidden,
        layers: s.layers,
        lag: s.lag,
        decoder_hidden: s.decoder_hidden.clone(),
    };
    let mut shred = ShredModel::new(shred_cfg, cfg.seed)?;
    let mut shred_train = s.train.clone();
    shred_train.padding = cfg.padding;
    log::info!("stage i: SHRED on {} members", train.len());
    report.shred = train_shred(&mut shred, &shred_samples(ds, &train), &shred_samples(ds, &val), &shred_train)?;
    shred.freeze();
    shred.normalization = Some(ds.normalization.clone());
    shred.save(&dir.join("shred"))?;
    let shred = ShredModel::load(&dir.join("shred"))?;

    // Stage ii reads latents only from the on-disk cache.
    let cache_dir = dir.join("latents");
    let d = shred.latent_dim();
    let w = cfg.observed_frames(total);
    let (train_cache, val_cache) = {
        let t = cache_latents(&shred, &deployment, cfg, &train)?;
        let v = cache_latents(&shred, &deployment, cfg, &val)?;
        write_cache(&cache_dir.join("train"), &t)?;
        write_cache(&cache_dir.join("validation"), &v)?;
        (
            read_cache(&cache_dir.join("train"), &vec![(total, w, d); t.len()])?,
            read_cache(&cache_dir.join("validation"), &vec![(total, w, d); v.len()])?,
        )
    };
    let tcfg = &cfg.temporal;
    let temporal_seed = cfg.seed.wrapping_add(1);
    log::info!("stage ii: {} temporal model", tcfg.kind);
    let temporal = match tcfg.kind {
        TemporalKind::Seq2seq => {
            let t_out = cfg.generated_frames(total);
            if t_out == 0 {
                return Err(Error::config("nothing to generate: the window covers the trajectory"));
            }
            let mut model = Seq2SeqTemporalModel::new(
                Seq2SeqConfig {
                    latent_dim: d,
                    hidden: tcfg.hidden,
                    observed: w,
                    out_len: t_out,
                    direction: cfg.direction,
                },
                temporal_seed,
            )?;
            report.temporal = train_seq2seq(
                &mut model,
                &seq2seq_examples(cfg, total, &train_cache)?,
                &seq2seq_examples(cfg, total, &val_cache)?,
                &tcfg.train,
            )?;
            TemporalModel::Seq2seq(model)
        }
        TemporalKind::Ar => {
            let lookback = cfg.ar_window(total);
            if lookback > w {
                return Err(Error::config("AR lookback exceeds the observed window"));
            }
            let full: Vec<&Tensor<f32>> = train_cache.iter().map(|c| &c.full).collect();
            let normalizer = LatentNormalizer::fit(&full)?;
            let norm_train: Vec<Tensor<f32>> = full.iter().map(|z| normalizer.normalize(z)).collect();
            let norm_val: Vec<Tensor<f32>> = val_cache.iter().map(|c| normalizer.normalize(&c.full)).collect();
            let mut model = ARModel::new(
                ArConfig {
                    latent_dim: d,
                    hidden: tcfg.hidden,
                    window: lookback,
                },
                temporal_seed,
            )?;
            let train_ds = build_ar_dataset(&norm_train.iter().collect::<Vec<_>>(), lookback)?;
            let val_ds: ArDataset = build_ar_dataset(&norm_val.iter().collect::<Vec<_>>(), lookback)?;
            report.temporal = train_ar(&mut model, &train_ds, &val_ds, &tcfg.train)?;
            model.normalizer = Some(normalizer);
            TemporalModel::Ar(model)
        }
    };
    let pipeline = TrainedPipeline {
        config: cfg.clone(),
        shred,
        temporal,
        deployment,
    };
    pipeline.save_temporal(dir)?;
    report.seconds = started.elapsed().as_secs_f64();
    write_json(&dir.join("train_report.json"), &report)?;
    Ok((pipeline, report))
}

/// `count` seeded contiguous crops of at least `min_len` rows.
pub fn extract_subsequences(trajectory: &Tensor<f32>, count: usize, min_len: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    let len = trajectory.rows();
    if min_len == 0 || min_len > len {
        return Err(Error::config(format!("min_len {min_len} outside [1, {len}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let l = rng.random_range(min_len..=len);
            let start = rng.random_range(0..=len - l);
            trajectory.slice_rows(start, start + l)
        })
        .collect()
}

/// Scores of one end-to-end run on the ground-truth member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub lapis: MetricsReport,
    /// Plain SHRED over the full sensor series.
    pub baseline: MetricsReport,
    pub train: TrainReport,
    pub inference_seconds: f64,
}

/// Simulate, train, infer on the held-out trajectory and score.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, with_ssim: bool) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let ds = EnsembleDataset::build(simulate_ensemble(&cfg.sim, cfg.ensemble)?, cfg.sensors, cfg.sensor_seed)?;
    run_on_dataset(cfg, &ds, dir, with_ssim)
}

pub fn run_on_dataset(cfg: &ExperimentConfig, ds: &EnsembleDataset, dir: &Path, with_ssim: bool) -> Result<ExperimentOutcome> {
    let (pipeline, train) = train_all(cfg, ds, dir)?;
    let gt = ds
        .ground_truth()
        .ok_or_else(|| Error::config("dataset has no ground-truth member"))?;
    debug_assert_eq!(gt.split, Split::GroundTruth);
    let mut result = pipeline.infer(&pipeline.window_of(&gt.sensors)?)?;
    let truth = match cfg.direction {
        Direction::Backward => gt.fields.clone(),
        Direction::Forward => gt.fields.slice_frames(0, result.reconstruction.num_frames())?,
    };
    let lapis = result.evaluate(&truth, with_ssim)?.clone();
    let baseline = MetricsReport::compute(
        &pipeline.reconstruct_full(&gt.sensors)?.reconstruction.frames,
        &gt.fields,
        None,
        with_ssim,
    )?;
    result.save(&dir.join("inference"))?;
    let outcome = ExperimentOutcome {
        lapis,
        baseline,
        train,
        inference_seconds: result.seconds,
    };
    write_json(&dir.join("outcome.json"), &outcome)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;
    use proptest::prelude::*;

    fn tiny(direction: Direction, kind: TemporalKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(System::Linear);
        c.sim = SimConfig {
            grid: vec![16],
            frames: 21,
            ..SimConfig::linear()
        };
        c.ensemble = 3;
        c.sensors = 4;
        c.window_frames = Some(5);
        c.direction = direction;
        c.padding = 4;
        c.sync_padding();
        c.shred.hidden = 6;
        c.shred.decoder_hidden = vec![16];
        c.shred.train.epochs = 4;
        c.temporal.kind = kind;
        c.temporal.hidden = 5;
        c.temporal.train.epochs = 4;
        c.temporal.train.batch_size = 8;
        c
    }

    fn dataset(c: &ExperimentConfig) -> EnsembleDataset {
        EnsembleDataset::build(simulate_ensemble(&c.sim, c.ensemble).unwrap(), c.sensors, c.sensor_seed).unwrap()
    }

    #[test]
    fn backward_pipeline_end_to_end() {
        let c = tiny(Direction::Backward, TemporalKind::Seq2seq);
        let ds = dataset(&c);
        let dir = tempfile::tempdir().unwrap();
        let (p, report) = train_all(&c, &ds, dir.path()).unwrap();
        let gt = ds.ground_truth().unwrap();
        assert!(!report.members_used.contains(&gt.index));
        assert!(p.shred.is_frozen());

        let window = p.window_of(&gt.sensors).unwrap();
        let r = p.infer(&window).unwrap();
        assert_eq!(r.reconstruction.num_frames(), 21);
        assert_eq!(r.observed.iter().filter(|&&o| o).count(), 5);
        assert!(r.observed[16] && !r.observed[15]);
        let again = p.infer(&window).unwrap();
        assert_eq!((&r.reconstruction, &r.latents), (&again.reconstruction, &again.latents));

        // Observed frames equal plain SHRED on the window.
        let plain = reconstruct_window(&p.shred, &p.deployment, &window, Direction::Backward, c.padding).unwrap();
        assert_eq!(r.reconstruction.frames.slice_rows(16, 21).unwrap(), plain.reconstruction.frames);

        // A full window degenerates to plain SHRED.
        let full = SensorWindow::new(gt.sensors.clone(), 0).unwrap();
        let all = infer_backward(&p.shred, &p.temporal, &p.deployment, &full, 21, c.padding).unwrap();
        assert_eq!(all.generated_frames(), 0);
        let plain_full = reconstruct_window(&p.shred, &p.deployment, &full, Direction::Backward, c.padding).unwrap();
        assert_eq!(all.reconstruction.frames, plain_full.reconstruction.frames);

        // Single-frame window through the padding path.
        let single = SensorWindow::terminal(&gt.sensors, 1).unwrap();
        assert!(infer_backward(&p.shred, &p.temporal, &p.deployment, &single, 21, c.padding).is_err());

        let back = TrainedPipeline::load(dir.path()).unwrap();
        assert_eq!(back, p);
        let mut scored = r.clone();
        let m = scored.evaluate(&gt.fields, false).unwrap();
        assert_eq!(m.nrmse, m.rmse / m.data_range);
        let out = dir.path().join("res");
        scored.save(&out).unwrap();
        assert_eq!(InferenceResult::load(&out).unwrap(), scored);
    }

    #[test]
    fn forward_ar_pipeline_is_prefix_consistent() {
        let mut c = tiny(Direction::Forward, TemporalKind::Ar);
        c.temporal.ar_window = Some(3);
        let ds = dataset(&c);
        let dir = tempfile::tempdir().unwrap();
        let (p, _) = train_all(&c, &ds, dir.path()).unwrap();
        let gt = ds.ground_truth().unwrap();
        let window = p.window_of(&gt.sensors).unwrap();
        let zero = infer_forward(&p.shred, &p.temporal, &p.deployment, &window, 0).unwrap();
        assert_eq!(zero.reconstruction.num_frames(), 5);
        let short = infer_forward(&p.shred, &p.temporal, &p.deployment, &window, 8).unwrap();
        let long = infer_forward(&p.shred, &p.temporal, &p.deployment, &window, 16).unwrap();
        assert_eq!(short.reconstruction.frames.data(), &long.reconstruction.frames.data()[..13 * 16]);
        assert_eq!(short.latents.data(), &long.latents.data()[..13 * short.latents.cols()]);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let c = tiny(Direction::Forward, TemporalKind::Seq2seq);
        let ds = dataset(&c);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (pa, _) = train_all(&c, &ds, a.path()).unwrap();
        let (pb, _) = train_all(&c, &ds, b.path()).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn subsequence_edges() {
        let z = Tensor::new(vec![250, 2], (0..500).map(|v| v as f32).collect()).unwrap();
        assert_eq!(extract_subsequences(&z, 1, 250, 0).unwrap(), vec![z.clone()]);
        assert_eq!(extract_subsequences(&z, 12, 100, 3).unwrap().len(), 12);
        assert!(extract_subsequences(&z, 1, 251, 0).is_err());
    }

    proptest! {
        #[test]
        fn crops_stay_in_bounds(len in 1usize..60, count in 0usize..10, seed in 0u64..100, frac in 0.0f64..1.0) {
            let z = Tensor::new(vec![len, 1], (0..len).map(|v| v as f32).collect()).unwrap();
            let min_len = ((len as f64 * frac) as usize).max(1);
            let crops = extract_subsequences(&z, count, min_len, seed).unwrap();
            prop_assert_eq!(crops.len(), count);
            for c in crops {
                prop_assert!(c.rows() >= min_len && c.rows() <= len);
                let start = c.data()[0] as usize;
                prop_assert!(c.data().iter().enumerate().all(|(i, &v)| v as usize == start + i));
            }
        }
    }
}
