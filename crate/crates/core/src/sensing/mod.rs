//! Sparse sensors: placement, sampling, lag windows, normalization and the
//! on-disk ensemble format.

mod dataset;

pub use dataset::{simulate_ensemble, split_for, EnsembleDataset, Member, Split};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::FieldSequence;
use crate::tensor::Tensor;

/// Distinct flat state indices observed by the sensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub indices: Vec<usize>,
    pub policy: String,
    pub seed: u64,
}

impl SensorLayout {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform draw of `p` distinct indices in `[0, n)` avoiding masked cells.
/// `mask` is per grid cell; with `channels > 1` a state index `i` lies in
/// cell `i % cells`.
pub fn place_sensors(n: usize, p: usize, mask: Option<&[bool]>, seed: u64) -> Result<SensorLayout> {
    let valid: Vec<usize> = match mask {
        None => (0..n).collect(),
        Some(m) => {
            if m.is_empty() || !n.is_multiple_of(m.len()) {
                return Err(Error::config("mask length must divide the state width"));
            }
            (0..n).filter(|&i| !m[i % m.len()]).collect()
        }
    };
    if p == 0 || p > valid.len() {
        return Err(Error::config(format!("cannot place {p} sensors on {} valid cells", valid.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = sample(&mut rng, valid.len(), p).into_iter().map(|k| valid[k]).collect();
    Ok(SensorLayout {
        indices,
        policy: "uniform".into(),
        seed,
    })
}

/// `s_t[j] = frames[t][indices[j]]`, shape `[(T+1), p]`.
pub fn sample_sensors(field: &FieldSequence, layout: &SensorLayout) -> Result<Tensor<f32>> {
    gather_columns(&field.frames, &layout.indices)
}

pub(crate) fn gather_columns(frames: &Tensor<f32>, indices: &[usize]) -> Result<Tensor<f32>> {
    let width = frames.cols();
    if let Some(&bad) = indices.iter().find(|&&i| i >= width) {
        return Err(Error::config(format!("sensor index {bad} outside state width {width}")));
    }
    let rows = frames.rows();
    let mut data = Vec::with_capacity(rows * indices.len());
    for t in 0..rows {
        let row = frames.row(t);
        data.extend(indices.iter().map(|&i| row[i]));
    }
    Tensor::new(vec![rows, indices.len()], data)
}

/// One `[ℓ, p]` window per time step; window `t` holds `s_{t−ℓ+1..=t}` with
/// indices below zero clamped to the first frame.
pub fn make_lag_windows(series: &Tensor<f32>, lag: usize) -> Result<Vec<Tensor<f32>>> {
    if lag == 0 {
        return Err(Error::config("lag must be at least 1"));
    }
    let (rows, p) = (series.rows(), series.cols());
    Ok((0..rows)
        .map(|t| {
            let mut data = Vec::with_capacity(lag * p);
            for k in 0..lag {
                let src = (t + k + 1).saturating_sub(lag);
                data.extend_from_slice(series.row(src));
            }
            Tensor::new(vec![lag, p], data).expect("window shape")
        })
        .collect())
}

/// Per-channel min/max of the training fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub cells: usize,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl Normalization {
    /// Statistics over all frames of the given fields, ignoring masked cells.
    pub fn fit<'a>(fields: impl IntoIterator<Item = &'a FieldSequence>) -> Result<Self> {
        let mut stats: Option<Normalization> = None;
        for f in fields {
            let cells = f.cells();
            let channels = f.channels.len();
            let s = stats.get_or_insert_with(|| Normalization {
                cells,
                min: vec![f32::INFINITY; channels],
                max: vec![f32::NEG_INFINITY; channels],
            });
            if s.cells != cells || s.min.len() != channels {
                return Err(Error::config("members disagree on grid or channel count"));
            }
            for t in 0..f.num_frames() {
                for (i, &v) in f.frame(t).iter().enumerate() {
                    if matches!(&f.mask, Some(m) if m[i % cells]) {
                        continue;
                    }
                    let ch = i / cells;
                    s.min[ch] = s.min[ch].min(v);
                    s.max[ch] = s.max[ch].max(v);
                }
            }
        }
        let s = stats.ok_or_else(|| Error::config("no training members to normalize with"))?;
        if s.min.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("a channel has no unmasked values"));
        }
        Ok(s)
    }

    pub fn channel_of(&self, state_index: usize) -> usize {
        state_index / self.cells
    }

    /// Maps `[min, max]` to `[0, 1]`; a degenerate channel maps to 0.5.
    #[inline]
    pub fn forward(&self, v: f32, ch: usize) -> f32 {
        let range = self.max[ch] - self.min[ch];
        if range > 0.0 {
            (v - self.min[ch]) / range
        } else {
            0.5
        }
    }

    #[inline]
    pub fn inverse(&self, v: f32, ch: usize) -> f32 {
        let range = self.max[ch] - self.min[ch];
        if range > 0.0 {
            v * range + self.min[ch]
        } else {
            self.min[ch]
        }
    }

    /// Normalize a `[rows, n]` block of full states.
    pub fn normalize_states(&self, frames: &Tensor<f32>) -> Tensor<f32> {
        self.map_states(frames, |s, v, ch| s.forward(v, ch))
    }

    pub fn denormalize_states(&self, frames: &Tensor<f32>) -> Tensor<f32> {
        self.map_states(frames, |s, v, ch| s.inverse(v, ch))
    }

    /// Normalize a `[rows, p]` sensor block using each sensor's channel.
    pub fn normalize_sensors(&self, values: &Tensor<f32>, layout: &SensorLayout) -> Tensor<f32> {
        self.map_sensors(values, layout, |s, v, ch| s.forward(v, ch))
    }

    pub fn denormalize_sensors(&self, values: &Tensor<f32>, layout: &SensorLayout) -> Tensor<f32> {
        self.map_sensors(values, layout, |s, v, ch| s.inverse(v, ch))
    }

    fn map_states(&self, frames: &Tensor<f32>, f: impl Fn(&Self, f32, usize) -> f32) -> Tensor<f32> {
        let n = frames.cols();
        let data = frames
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| f(self, v, self.channel_of(k % n)))
            .collect();
        Tensor::new(frames.shape().to_vec(), data).expect("same shape")
    }

    fn map_sensors(&self, values: &Tensor<f32>, layout: &SensorLayout, f: impl Fn(&Self, f32, usize) -> f32) -> Tensor<f32> {
        let p = values.cols();
        let data = values
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| f(self, v, self.channel_of(layout.indices[k % p])))
            .collect();
        Tensor::new(values.shape().to_vec(), data).expect("same shape")
    }
}
