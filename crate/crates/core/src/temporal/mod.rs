//! Latent-space temporal inference: terminal padding, the sequence-to-sequence
//! generator for backward/forward inference, and the autoregressive one-step
//! model with rollout.
//!
//! Batched latent trajectories are stored time-major: row `t·B + b` holds
//! step `t` of batch member `b`.

mod ar;
mod seq2seq;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use crate::shred::augment_training_padding;
pub use ar::{build_ar_dataset, train_ar, ARModel, ArConfig, ArDataset};
pub use seq2seq::{positional_values, train_seq2seq, Seq2SeqConfig, Seq2SeqExample, Seq2SeqTemporalModel};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{assign_tensors, ensure_dir, read_json, read_tensors, write_json, write_tensors, TensorEntry};
use crate::nn::AdamConfig;
use crate::shred::{ShredMode, ShredModel};
use crate::tensor::{Real, Tensor};

pub use crate::shred::History;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Observed window at the end; earlier frames are inferred.
    Backward,
    /// Observed window at the start; later frames are inferred.
    Forward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Backward => "backward",
            Direction::Forward => "forward",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "backward" => Ok(Direction::Backward),
            "forward" => Ok(Direction::Forward),
            other => Err(Error::config(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalKind {
    Seq2seq,
    Ar,
}

impl fmt::Display for TemporalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemporalKind::Seq2seq => "seq2seq",
            TemporalKind::Ar => "ar",
        })
    }
}

impl FromStr for TemporalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seq2seq" => Ok(TemporalKind::Seq2seq),
            "ar" => Ok(TemporalKind::Ar),
            other => Err(Error::config(format!("unknown temporal model `{other}`"))),
        }
    }
}

/// A latent trajectory `[(T+1), d_z]` and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory<T = f32> {
    pub codes: Tensor<T>,
    pub member: Option<usize>,
    pub normalized: bool,
}

impl<T: Real> LatentTrajectory<T> {
    pub fn new(codes: Tensor<T>, member: Option<usize>) -> Result<Self> {
        if !codes.all_finite() {
            return Err(Error::NonFinite("latent trajectory".into()));
        }
        Ok(LatentTrajectory {
            codes,
            member,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.codes.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingConfig {
    pub length: usize,
    pub in_training: bool,
}

impl PaddingConfig {
    pub fn new(length: usize, in_training: bool) -> Result<Self> {
        if length == 0 {
            return Err(Error::config("padding length must be at least 1"));
        }
        Ok(PaddingConfig { length, in_training })
    }
}

/// `L` copies of the terminal sensor vector.
pub fn pad_terminal<T: Real>(terminal: &[T], l: usize) -> Result<Tensor<T>> {
    if l == 0 {
        return Err(Error::config("padding length must be at least 1"));
    }
    Tensor::new(vec![l, terminal.len()], terminal.repeat(l))
}

/// Last latent of a frozen sequence-mode encoder over a padded pseudo-sequence.
pub fn encode_padded_terminal<T: Real>(shred: &ShredModel<T>, pad: &Tensor<T>) -> Result<Tensor<T>> {
    if !shred.is_frozen() {
        return Err(Error::config("padded encoding requires a frozen SHRED model"));
    }
    if shred.mode() != ShredMode::Seq2seq {
        return Err(Error::config("padded encoding requires seq2seq mode"));
    }
    let z = shred.encode_sequence(pad)?;
    z.slice_rows(z.rows() - 1, z.rows())
}

const NORMALIZER_EPS: f64 = 1e-8;

/// Per-dimension z-score with training statistics. Dimensions whose
/// standard deviation is below 1e-8 divide by 1e-8.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNormalizer {
    pub fn fit<T: Real>(trajectories: &[&Tensor<T>]) -> Result<Self> {
        let d = trajectories.first().ok_or_else(|| Error::config("no latent trajectories"))?.cols();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        for z in trajectories {
            if z.cols() != d {
                return Err(Error::config("latent widths differ"));
            }
            for r in 0..z.rows() {
                for (j, v) in z.row(r).iter().enumerate() {
                    sum[j] += v.to_f64();
                }
            }
            count += z.rows();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for z in trajectories {
            for r in 0..z.rows() {
                for (j, v) in z.row(r).iter().enumerate() {
                    sq[j] += (v.to_f64() - mean[j]).powi(2);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Ok(LatentNormalizer { mean, std })
    }

    fn scale(&self, j: usize) -> f64 {
        self.std[j].max(NORMALIZER_EPS)
    }

    pub fn normalize<T: Real>(&self, z: &Tensor<T>) -> Tensor<T> {
        self.map(z, |v, j| (v - self.mean[j]) / self.scale(j))
    }

    pub fn denormalize<T: Real>(&self, z: &Tensor<T>) -> Tensor<T> {
        self.map(z, |v, j| v * self.scale(j) + self.mean[j])
    }

    fn map<T: Real>(&self, z: &Tensor<T>, f: impl Fn(f64, usize) -> f64) -> Tensor<T> {
        let d = z.cols();
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| T::from_f64(f(v.to_f64(), k % d)))
            .collect();
        Tensor::new(z.shape().to_vec(), data).expect("same shape")
    }
}

/// Per-step `[B, d]` constants from `B` trajectories of equal length.
pub fn time_major_steps<T: Real>(tape: &mut Tape<T>, batch: &[&Tensor<T>]) -> Result<Vec<Var>> {
    let stacked = stack_time_major(batch)?;
    let b = batch.len();
    Ok((0..stacked.rows() / b)
        .map(|t| tape.constant(stacked.slice_rows(t * b, (t + 1) * b).expect("step rows")))
        .collect())
}

/// `[L·B, d]` with row `t·B + b` = `batch[b].row(t)`.
pub fn stack_time_major<T: Real>(batch: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = batch.first().ok_or_else(|| Error::config("empty batch"))?;
    let (l, d) = (first.rows(), first.cols());
    if batch.iter().any(|t| t.rows() != l || t.cols() != d) {
        return Err(Error::config("batched trajectories must share length and width"));
    }
    let mut data = Vec::with_capacity(l * d * batch.len());
    for t in 0..l {
        for m in batch {
            data.extend_from_slice(m.row(t));
        }
    }
    Tensor::new(vec![l * batch.len(), d], data)
}

/// Inverse of [`stack_time_major`].
pub fn unstack_time_major<T: Real>(stacked: &Tensor<T>, batch: usize) -> Vec<Tensor<T>> {
    let (l, d) = (stacked.rows() / batch, stacked.cols());
    (0..batch)
        .map(|b| {
            let data: Vec<T> = (0..l).flat_map(|t| stacked.row(t * batch + b).to_vec()).collect();
            Tensor::new(vec![l, d], data).expect("unstack shape")
        })
        .collect()
}

/// `(1/T)·Σ_t ‖ẑ_t − z_t‖²`, averaged over the batch.
pub fn recon_loss<T: Real>(tape: &mut Tape<T>, zhat: Var, z: Var) -> Result<Var> {
    let rows = tape.value(zhat).rows();
    let d = tape.sub(zhat, z)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::from_f64(1.0 / rows as f64)))
}

/// Mean squared mismatch of first differences plus
/// `½‖Var(Ẑ) − Var(Z)‖²` (population variance of each dimension over time),
/// averaged over a time-major batch of `batch` trajectories.
pub fn shape_loss<T: Real>(tape: &mut Tape<T>, zhat: Var, z: Var, batch: usize) -> Result<Var> {
    let rows = tape.value(zhat).rows();
    if !rows.is_multiple_of(batch) || tape.shape(zhat) != tape.shape(z) {
        return Err(Error::ShapeMismatch {
            op: "shape_loss",
            left: tape.shape(zhat).to_vec(),
            right: tape.shape(z).to_vec(),
        });
    }
    let steps = rows / batch;
    let variance = variance_term(tape, zhat, z, batch, steps)?;
    if steps < 2 {
        return Ok(variance);
    }
    let dh = first_difference(tape, zhat, batch, rows)?;
    let dz = first_difference(tape, z, batch, rows)?;
    let m = tape.sub(dh, dz)?;
    let sq = tape.square(m);
    let diff = tape.mean(sq);
    tape.add(diff, variance)
}

fn first_difference<T: Real>(tape: &mut Tape<T>, x: Var, batch: usize, rows: usize) -> Result<Var> {
    let later = tape.slice_rows(x, batch, rows)?;
    let earlier = tape.slice_rows(x, 0, rows - batch)?;
    tape.sub(later, earlier)
}

fn variance_term<T: Real>(tape: &mut Tape<T>, zhat: Var, z: Var, batch: usize, steps: usize) -> Result<Var> {
    let rows = batch * steps;
    let mut avg = vec![T::ZERO; batch * rows];
    let mut rep = vec![T::ZERO; rows * batch];
    let w = T::from_f64(1.0 / steps as f64);
    for t in 0..steps {
        for b in 0..batch {
            avg[b * rows + t * batch + b] = w;
            rep[(t * batch + b) * batch + b] = T::ONE;
        }
    }
    let avg = tape.constant(Tensor::new(vec![batch, rows], avg)?);
    let rep = tape.constant(Tensor::new(vec![rows, batch], rep)?);
    let mut var = |x: Var| -> Result<Var> {
        let mean = tape.matmul(avg, x)?;
        let spread = tape.matmul(rep, mean)?;
        let c = tape.sub(x, spread)?;
        let c2 = tape.square(c);
        tape.matmul(avg, c2)
    };
    let vh = var(zhat)?;
    let vz = var(z)?;
    let d = tape.sub(vh, vz)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::from_f64(0.5 / batch as f64)))
}

/// Loop form of [`recon_loss`] for a single trajectory.
pub fn recon_loss_value<T: Real>(zhat: &Tensor<T>, z: &Tensor<T>) -> f64 {
    let mut s = 0.0;
    for t in 0..z.rows() {
        for (a, b) in zhat.row(t).iter().zip(z.row(t)) {
            s += (a.to_f64() - b.to_f64()).powi(2);
        }
    }
    s / z.rows() as f64
}

/// Loop form of [`shape_loss`] for a single trajectory.
pub fn shape_loss_value<T: Real>(zhat: &Tensor<T>, z: &Tensor<T>) -> f64 {
    let (steps, d) = (z.rows(), z.cols());
    let at = |m: &Tensor<T>, t: usize, j: usize| m.row(t)[j].to_f64();
    let mut diff = 0.0;
    if steps >= 2 {
        for t in 1..steps {
            for j in 0..d {
                let e = (at(zhat, t, j) - at(zhat, t - 1, j)) - (at(z, t, j) - at(z, t - 1, j));
                diff += e * e;
            }
        }
        diff /= ((steps - 1) * d) as f64;
    }
    let var = |m: &Tensor<T>, j: usize| {
        let mu = (0..steps).map(|t| at(m, t, j)).sum::<f64>() / steps as f64;
        (0..steps).map(|t| (at(m, t, j) - mu).powi(2)).sum::<f64>() / steps as f64
    };
    let v: f64 = (0..d).map(|j| (var(zhat, j) - var(z, j)).powi(2)).sum();
    diff + 0.5 * v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalTrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub lambda_recon: f64,
    pub lambda_shape: f64,
    /// Minibatch size for one-step AR pairs.
    pub batch_size: usize,
}

impl Default for TemporalTrainConfig {
    fn default() -> Self {
        TemporalTrainConfig {
            epochs: 2000,
            patience: 300,
            adam: AdamConfig::default(),
            seed: 0,
            lambda_recon: 1.0,
            lambda_shape: 0.1,
            batch_size: 64,
        }
    }
}

/// Either trained temporal model.
#[derive(Clone, Debug, PartialEq)]
pub enum TemporalModel {
    Seq2seq(Seq2SeqTemporalModel<f32>),
    Ar(ARModel<f32>),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "lowercase")]
enum TemporalBlock {
    Seq2seq {
        config: Seq2SeqConfig,
        lambda_recon: f64,
        lambda_shape: f64,
    },
    Ar {
        config: ArConfig,
        normalizer: Option<LatentNormalizer>,
    },
}

#[derive(Serialize, Deserialize)]
struct TemporalManifest {
    kind: String,
    temporal: TemporalBlock,
    tensors: Vec<TensorEntry>,
}

impl TemporalModel {
    pub fn kind(&self) -> TemporalKind {
        match self {
            TemporalModel::Seq2seq(_) => TemporalKind::Seq2seq,
            TemporalModel::Ar(_) => TemporalKind::Ar,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            TemporalModel::Seq2seq(m) => m.config.latent_dim,
            TemporalModel::Ar(m) => m.config.latent_dim,
        }
    }

    /// Writes `model.json` and `weights.bin`. The λ values are recorded for
    /// reference; they only matter during training.
    pub fn save(&self, dir: &Path, lambdas: (f64, f64)) -> Result<()> {
        ensure_dir(dir)?;
        let (params, temporal) = match self {
            TemporalModel::Seq2seq(m) => (
                m.params(),
                TemporalBlock::Seq2seq {
                    config: m.config.clone(),
                    lambda_recon: lambdas.0,
                    lambda_shape: lambdas.1,
                },
            ),
            TemporalModel::Ar(m) => (
                m.params(),
                TemporalBlock::Ar {
                    config: m.config.clone(),
                    normalizer: m.normalizer.clone(),
                },
            ),
        };
        let named: Vec<(String, &Tensor<f32>)> = params.into_iter().enumerate().map(|(i, p)| (format!("temporal.{i}"), p)).collect();
        let tensors = write_tensors(&dir.join("weights.bin"), &named)?;
        write_json(
            &dir.join("model.json"),
            &TemporalManifest {
                kind: "temporal".into(),
                temporal,
                tensors,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let m: TemporalManifest = read_json(&path)?;
        if m.kind != "temporal" {
            return Err(Error::format(&path, format!("expected a temporal model, found `{}`", m.kind)));
        }
        let tensors = read_tensors(&dir.join("weights.bin"), &m.tensors)?;
        match m.temporal {
            TemporalBlock::Seq2seq { config, .. } => {
                let mut model = Seq2SeqTemporalModel::zeros(config)?;
                assign_tensors(&path, model.params_mut(), tensors)?;
                Ok(TemporalModel::Seq2seq(model))
            }
            TemporalBlock::Ar { config, normalizer } => {
                let mut model = ARModel::zeros(config)?;
                assign_tensors(&path, model.params_mut(), tensors)?;
                model.normalizer = normalizer;
                Ok(TemporalModel::Ar(model))
            }
        }
    }
}
