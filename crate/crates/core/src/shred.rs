//! Shallow recurrent decoder: an LSTM encoder over sensor histories and an
//! MLP decoder to the full state, in frame-by-frame or sequence mode.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{assign_tensors, ensure_dir, read_json, read_tensors, write_json, write_tensors, TensorEntry};
use crate::nn::{gradients_of, Activation, Adam, AdamConfig, BoundLstmStack, BoundMlp, BoundVars, LstmStack, Mlp, Params};
use crate::sensing::Normalization;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShredMode {
    /// One latent per lag window; unidirectional encoder.
    Frame,
    /// One latent per time step from a bidirectional pass over the series.
    Seq2seq,
}

impl fmt::Display for ShredMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShredMode::Frame => "frame",
            ShredMode::Seq2seq => "seq2seq",
        })
    }
}

impl FromStr for ShredMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frame" => Ok(ShredMode::Frame),
            "seq2seq" => Ok(ShredMode::Seq2seq),
            other => Err(Error::config(format!("unknown SHRED mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShredConfig {
    pub mode: ShredMode,
    pub sensors: usize,
    pub state_width: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Window length in frame mode; ignored in sequence mode.
    pub lag: usize,
    pub decoder_hidden: Vec<usize>,
}

impl ShredConfig {
    pub fn frame(sensors: usize, state_width: usize) -> Self {
        ShredConfig {
            mode: ShredMode::Frame,
            sensors,
            state_width,
            hidden: 64,
            layers: 2,
            lag: 10,
            decoder_hidden: vec![350, 350],
        }
    }

    pub fn seq2seq(sensors: usize, state_width: usize, hidden: usize) -> Self {
        ShredConfig {
            mode: ShredMode::Seq2seq,
            sensors,
            state_width,
            hidden,
            layers: 1,
            lag: 1,
            decoder_hidden: vec![350, 350],
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self.mode {
            ShredMode::Frame => self.hidden,
            ShredMode::Seq2seq => 2 * self.hidden,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sensors == 0 || self.state_width == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::config("SHRED dimensions must be positive"));
        }
        if self.mode == ShredMode::Frame && self.lag == 0 {
            return Err(Error::config("frame mode needs lag ≥ 1"));
        }
        Ok(())
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim()];
        w.extend(&self.decoder_hidden);
        w.push(self.state_width);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShredModel<T = f32> {
    pub config: ShredConfig,
    encoder: LstmStack<T>,
    decoder: Mlp<T>,
    frozen: bool,
    pub normalization: Option<Normalization>,
}

#[derive(Clone, Debug)]
pub struct BoundShred {
    pub encoder: BoundLstmStack,
    pub decoder: BoundMlp,
}

impl BoundVars for BoundShred {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        self.encoder.collect_vars(out);
        self.decoder.collect_vars(out);
    }
}

/// One training trajectory: normalized sensor series `[rows, p]`, normalized
/// target states `[rows, n]`, per-entry loss weights of length `n`.
#[derive(Clone, Debug)]
pub struct ShredSample<T = f32> {
    pub sensors: Tensor<T>,
    pub target: Tensor<T>,
    pub weights: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShredTrainConfig {
    pub epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Terminal padding length appended to every training series (0 = off).
    pub padding: usize,
}

impl Default for ShredTrainConfig {
    fn default() -> Self {
        ShredTrainConfig {
            epochs: 300,
            patience: 50,
            adam: AdamConfig::default(),
            seed: 0,
            padding: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl<T: Real> ShredModel<T> {
    pub fn new(config: ShredConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bidir = config.mode == ShredMode::Seq2seq;
        let encoder = LstmStack::new(config.sensors, config.hidden, config.layers, bidir, &mut rng);
        let decoder = Mlp::new(&config.decoder_widths(), Activation::Gelu, false, &mut rng);
        Ok(ShredModel {
            config,
            encoder,
            decoder,
            frozen: false,
            normalization: None,
        })
    }

    pub fn zeros(config: ShredConfig) -> Result<Self> {
        config.validate()?;
        let bidir = config.mode == ShredMode::Seq2seq;
        Ok(ShredModel {
            encoder: LstmStack::zeros(config.sensors, config.hidden, config.layers, bidir),
            decoder: Mlp::zeros(&config.decoder_widths(), Activation::Gelu, false),
            config,
            frozen: false,
            normalization: None,
        })
    }

    pub fn mode(&self) -> ShredMode {
        self.config.mode
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn encoder(&self) -> &LstmStack<T> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp<T> {
        &self.decoder
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable parameters; rejected once frozen.
    pub fn params_mut(&mut self) -> Result<Vec<&mut Tensor<T>>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(self.all_params_mut())
    }

    fn all_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    /// One optimizer step; rejected once frozen.
    pub fn apply_gradients(&mut self, adam: &mut Adam, grads: &[Tensor<T>]) -> Result<()> {
        let mut params = self.params_mut()?;
        adam.step(&mut params, grads)
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundShred {
        BoundShred {
            encoder: self.encoder.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
        }
    }

    /// Bind to existing vars, consumed in `params()` order.
    pub fn bind_vars(&self, vars: &mut impl Iterator<Item = Var>) -> BoundShred {
        BoundShred {
            encoder: self.encoder.bind_vars(vars),
            decoder: self.decoder.bind_vars(vars),
        }
    }

    fn check_sensors(&self, series: &Tensor<T>) -> Result<()> {
        if series.shape().len() != 2 || series.cols() != self.config.sensors || series.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "shred input",
                left: series.shape().to_vec(),
                right: vec![0, self.config.sensors],
            });
        }
        Ok(())
    }

    /// Latent trajectory `[rows, d_z]` on a tape. Frame mode batches every
    /// lag window of the series (first row replicated leftward); sequence
    /// mode runs one bidirectional pass.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, bound: &BoundShred, series: &Tensor<T>) -> Result<Var> {
        self.check_sensors(series)?;
        let rows = series.rows();
        match self.config.mode {
            ShredMode::Frame => {
                let lag = self.config.lag;
                let steps: Vec<Var> = (0..lag)
                    .map(|k| {
                        let mut data = Vec::with_capacity(rows * series.cols());
                        for t in 0..rows {
                            data.extend_from_slice(series.row((t + k + 1).saturating_sub(lag)));
                        }
                        tape.constant(Tensor::new(vec![rows, series.cols()], data).expect("window shape"))
                    })
                    .collect();
                let out = bound.encoder.forward(tape, &steps)?;
                Ok(*out.last().expect("lag ≥ 1"))
            }
            ShredMode::Seq2seq => {
                let steps = crate::nn::split_rows(tape, series);
                let out = bound.encoder.forward(tape, &steps)?;
                tape.concat_rows(&out)
            }
        }
    }

    /// Full-state reconstruction `[rows, n]` on a tape.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, bound: &BoundShred, series: &Tensor<T>) -> Result<Var> {
        let z = self.encode_on_tape(tape, bound, series)?;
        bound.decoder.forward(tape, z)
    }

    /// Latent of one `[ℓ, p]` window: the encoder's last hidden state.
    pub fn encode_frame(&self, window: &Tensor<T>) -> Result<Tensor<T>> {
        if self.config.mode != ShredMode::Frame {
            return Err(Error::config("encode_frame requires frame mode"));
        }
        self.check_sensors(window)?;
        let z = self.encoder.run(window)?;
        z.slice_rows(z.rows() - 1, z.rows())
    }

    /// Per-step bidirectional latents `[rows, 2·d_h]`.
    pub fn encode_sequence(&self, series: &Tensor<T>) -> Result<Tensor<T>> {
        if self.config.mode != ShredMode::Seq2seq {
            return Err(Error::config("encode_sequence requires seq2seq mode"));
        }
        self.check_sensors(series)?;
        self.encoder.run(series)
    }

    /// Latent trajectory of a sensor series in the model's mode.
    pub fn encode(&self, series: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let z = self.encode_on_tape(&mut tape, &bound, series)?;
        Ok(tape.value(z).clone())
    }

    /// Decoder applied row-wise to `[m, d_z]` latents.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.cols() != self.latent_dim() {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: z.shape().to_vec(),
                right: vec![0, self.latent_dim()],
            });
        }
        self.decoder.run(z)
    }

    pub fn reconstruct(&self, series: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(series)?)
    }
}

/// `(1/rows)·Σ_t Σ_i w_i (pred − target)²` on a tape.
pub fn shred_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, weights: Option<&[T]>) -> Result<Var> {
    let rows = tape.value(pred).rows();
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let weighted = match weights {
        None => sq,
        Some(w) => {
            let n = tape.value(pred).cols();
            if w.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "shred_loss weights",
                    left: vec![w.len()],
                    right: vec![n],
                });
            }
            let mut full = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                full.extend_from_slice(w);
            }
            let wv = tape.constant(Tensor::new(vec![rows, n], full)?);
            tape.mul(sq, wv)?
        }
    };
    let total = tape.sum(weighted);
    Ok(tape.scale(total, T::from_f64(1.0 / rows as f64)))
}

/// Tape-free value of [`shred_loss`].
pub fn shred_loss_value<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, weights: Option<&[T]>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "shred_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let n = pred.cols();
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(k, (a, b))| {
            let w = weights.map_or(1.0, |w| w[k % n].to_f64());
            let d = a.to_f64() - b.to_f64();
            w * d * d
        })
        .sum();
    Ok(total / pred.rows() as f64)
}

/// Appends `l` copies of the last row.
pub fn augment_training_padding<T: Real>(series: &Tensor<T>, l: usize) -> Result<Tensor<T>> {
    if l == 0 {
        return Ok(series.clone());
    }
    let last = series.slice_rows(series.rows() - 1, series.rows())?;
    let mut parts = vec![series];
    parts.extend(std::iter::repeat_n(&last, l));
    Tensor::vstack(&parts)
}

fn sample_loss<T: Real>(model: &ShredModel<T>, s: &ShredSample<T>, padding: usize) -> Result<f64> {
    let sensors = augment_training_padding(&s.sensors, padding)?;
    let target = augment_training_padding(&s.target, padding)?;
    let pred = model.reconstruct(&sensors)?;
    shred_loss_value(&pred, &target, s.weights.as_deref())
}

/// Mean loss over samples without touching the weights.
pub fn evaluate_shred<T: Real>(model: &ShredModel<T>, samples: &[ShredSample<T>], padding: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(model, s, padding)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Adam over whole trajectories, one member per step, shuffled per epoch.
/// Keeps the weights of the best validation epoch (training loss when there
/// is no validation member).
pub fn train_shred<T: Real>(
    model: &mut ShredModel<T>,
    train: &[ShredSample<T>],
    validation: &[ShredSample<T>],
    cfg: &ShredTrainConfig,
) -> Result<History> {
    if model.is_frozen() {
        return Err(Error::Frozen);
    }
    if train.is_empty() {
        return Err(Error::config("no training members"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut history = History::default();
    let mut best: Option<(f64, ShredModel<T>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &k in &order {
            let s = &train[k];
            let sensors = augment_training_padding(&s.sensors, cfg.padding)?;
            let target = augment_training_padding(&s.target, cfg.padding)?;
            tape.reset();
            let bound = model.bind(&mut tape, true);
            let pred = model.forward_on_tape(&mut tape, &bound, &sensors)?;
            let tv = tape.constant(target);
            let loss = shred_loss(&mut tape, pred, tv, s.weights.as_deref())?;
            let value = tape.value(loss).data()[0].to_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "shred",
                    epoch,
                    loss: value,
                });
            }
            epoch_loss += value;
            let grads = tape.backward(loss)?;
            let g = gradients_of(&tape, &grads, &bound);
            model.apply_gradients(&mut adam, &g)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        history.train.push(train_loss);
        let score = if validation.is_empty() {
            train_loss
        } else {
            let v = evaluate_shred(model, validation, cfg.padding)?;
            history.validation.push(v);
            v
        };
        if !score.is_finite() {
            return Err(Error::Diverged {
                stage: "shred",
                epoch,
                loss: score,
            });
        }
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("shred: early stop at epoch {epoch}");
                break;
            }
        }
        log::debug!("shred epoch {epoch}: train {train_loss:.6e} score {score:.6e}");
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(history)
}

#[derive(Serialize, Deserialize)]
struct ShredManifest {
    kind: String,
    config: ShredConfig,
    frozen: bool,
    normalization: Option<Normalization>,
    tensors: Vec<TensorEntry>,
}

fn param_names(model: &ShredModel<f32>) -> Vec<String> {
    let enc = model.encoder.params().len();
    (0..model.params().len())
        .map(|i| {
            if i < enc {
                format!("encoder.{i}")
            } else {
                format!("decoder.{}", i - enc)
            }
        })
        .collect()
}

impl ShredModel<f32> {
    /// Writes `model.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let named: Vec<(String, &Tensor<f32>)> = param_names(self).into_iter().zip(self.params()).collect();
        let tensors = write_tensors(&dir.join("weights.bin"), &named)?;
        write_json(
            &dir.join("model.json"),
            &ShredManifest {
                kind: "shred".into(),
                config: self.config.clone(),
                frozen: self.frozen,
                normalization: self.normalization.clone(),
                tensors,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let m: ShredManifest = read_json(&path)?;
        if m.kind != "shred" {
            return Err(Error::format(&path, format!("expected a shred model, found `{}`", m.kind)));
        }
        let mut model = ShredModel::zeros(m.config)?;
        let tensors = read_tensors(&dir.join("weights.bin"), &m.tensors)?;
        assign_tensors(&path, model.all_params_mut(), tensors)?;
        model.normalization = m.normalization;
        model.frozen = m.frozen;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::nrmse;
    use crate::sensing::{place_sensors, sample_sensors};
    use crate::sim::{simulate, SimConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(mode: ShredMode) -> ShredConfig {
        ShredConfig {
            hidden: 8,
            decoder_hidden: vec![16],
            lag: 4,
            ..match mode {
                ShredMode::Frame => ShredConfig::frame(3, 20),
                ShredMode::Seq2seq => ShredConfig::seq2seq(3, 20, 8),
            }
        }
    }

    #[test]
    fn zero_encoder_gives_zero_latent() {
        let m = ShredModel::<f32>::zeros(ShredConfig::frame(3, 10)).unwrap();
        let z = m.encode_frame(&random(10, 3, 1)).unwrap();
        assert_eq!(z.shape(), &[1, 64]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_decoder_gives_bias_field() {
        let mut m = ShredModel::<f32>::new(small(ShredMode::Frame), 0).unwrap();
        m.decoder = Mlp::zeros(&m.config.decoder_widths(), Activation::Gelu, false);
        m.decoder.layers.last_mut().unwrap().bias = Tensor::full(&[1, 20], 0.25);
        let y = m.decode(&random(1, 8, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn lag_one_equals_single_step() {
        let cfg = ShredConfig {
            lag: 1,
            ..small(ShredMode::Frame)
        };
        let m = ShredModel::<f64>::new(cfg, 3).unwrap();
        let s = random(1, 3, 4).cast::<f64>();
        let z = m.encode_frame(&s).unwrap();
        let (h, layer) = (8, &m.encoder.layers[0].forward);
        // h = o ⊙ tanh(i ⊙ g) with zero initial state, layer by layer.
        let step = |x: &[f64], d: &crate::nn::LstmDirection<f64>| -> Vec<f64> {
            (0..h)
                .map(|j| {
                    let gate = |g: usize| {
                        d.bias.data()[g * h + j]
                            + x.iter()
                                .enumerate()
                                .map(|(k, v)| v * d.w_ih.data()[k * 4 * h + g * h + j])
                                .sum::<f64>()
                    };
                    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
                    sig(gate(3)) * (sig(gate(0)) * gate(2).tanh()).tanh()
                })
                .collect()
        };
        let h1 = step(s.data(), layer);
        let h2 = step(&h1, &m.encoder.layers[1].forward);
        for (a, b) in z.data().iter().zip(&h2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_window_latent_saturates() {
        let m = ShredModel::<f64>::new(ShredConfig::frame(3, 10), 7).unwrap();
        let row = random(1, 3, 8).cast::<f64>();
        let window = |len: usize| Tensor::vstack(&vec![&row; len]).unwrap();
        // Short windows can still be in the transient; check the asymptotic regime.
        let gaps: Vec<f64> = [4, 8, 16, 32, 64]
            .iter()
            .map(|&len| {
                let a = m.encode_frame(&window(len)).unwrap();
                let b = m.encode_frame(&window(2 * len)).unwrap();
                a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        for w in gaps.windows(2) {
            assert!(w[1] < w[0], "gaps {gaps:?}");
        }
    }

    #[test]
    fn batched_frame_encoding_matches_per_window() {
        let m = ShredModel::<f32>::new(small(ShredMode::Frame), 5).unwrap();
        let s = random(9, 3, 6);
        let z = m.encode(&s).unwrap();
        let windows = crate::sensing::make_lag_windows(&s, 4).unwrap();
        for (t, w) in windows.iter().enumerate() {
            let zt = m.encode_frame(w).unwrap();
            for (a, b) in zt.data().iter().zip(z.row(t)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sequence_width_is_twice_hidden() {
        let m = ShredModel::<f32>::new(small(ShredMode::Seq2seq), 1).unwrap();
        for rows in [1, 2, 13] {
            assert_eq!(m.encode_sequence(&random(rows, 3, rows as u64)).unwrap().shape(), &[rows, 16]);
        }
        assert!(m.encode_frame(&random(2, 3, 0)).is_err());
    }

    #[test]
    fn bidirectional_latent_depends_on_future() {
        let m = ShredModel::<f32>::new(small(ShredMode::Seq2seq), 2).unwrap();
        let s = random(12, 3, 3);
        let full = m.encode_sequence(&s).unwrap();
        let part = m.encode_sequence(&s.slice_rows(0, 6).unwrap()).unwrap();
        assert_ne!(full.row(5), part.row(5));
    }

    #[test]
    fn frame_output_ignores_sensors_outside_window() {
        let m = ShredModel::<f32>::new(small(ShredMode::Frame), 4).unwrap();
        let s = random(15, 3, 9);
        let base = m.reconstruct(&s).unwrap();
        let mut t = s.clone();
        for v in &mut t.data_mut()[..3 * 6] {
            *v += 1.0;
        }
        let moved = m.reconstruct(&t).unwrap();
        // Frame 9 sees rows 6..=9 only.
        assert_eq!(base.row(9), moved.row(9));
        assert_eq!(&base.data()[9 * 20..], &moved.data()[9 * 20..]);
        assert_ne!(base.row(8), moved.row(8));
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let (p, y) = (random(4, 5, 1), random(4, 5, 2));
        let mut tape = Tape::new();
        let (pv, yv) = (tape.constant(p.clone()), tape.constant(y.clone()));
        let loss = shred_loss(&mut tape, pv, yv, None).unwrap();
        let mut oracle = 0.0f64;
        for t in 0..4 {
            for i in 0..5 {
                oracle += ((p.row(t)[i] - y.row(t)[i]) as f64).powi(2);
            }
        }
        oracle /= 4.0;
        assert!((tape.value(loss).data()[0] as f64 - oracle).abs() < 1e-5);
        assert!((shred_loss_value(&p, &y, None).unwrap() - oracle).abs() < 1e-9);
        let single = shred_loss_value(
            &Tensor::from_rows(&[vec![1.5f32]]).unwrap(),
            &Tensor::from_rows(&[vec![1.0f32]]).unwrap(),
            None,
        );
        assert_eq!(single.unwrap(), 0.25);
        assert_eq!(shred_loss_value(&p, &p, None).unwrap(), 0.0);
    }

    #[test]
    fn zero_weight_region_receives_no_gradient() {
        let m = ShredModel::<f64>::new(small(ShredMode::Seq2seq), 8).unwrap();
        let s = random(6, 3, 1).cast::<f64>();
        let y = random(6, 20, 2).cast::<f64>();
        let mut w = vec![1.0f64; 20];
        for v in &mut w[5..12] {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let pred = m.forward_on_tape(&mut tape, &bound, &s).unwrap();
        let yv = tape.constant(y);
        let loss = shred_loss(&mut tape, pred, yv, Some(&w)).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = gradients_of(&tape, &grads, &bound);
        let (gw, gb) = (&g[g.len() - 2], &g[g.len() - 1]);
        for i in 5..12 {
            assert_eq!(gb.data()[i], 0.0);
            assert!((0..16).all(|r| gw.data()[r * 20 + i] == 0.0));
        }
        assert!(gb.data()[0] != 0.0);
    }

    #[test]
    fn freeze_blocks_mutation_and_keeps_outputs() {
        let mut m = ShredModel::<f32>::new(small(ShredMode::Frame), 2).unwrap();
        let s = random(7, 3, 0);
        let before = m.reconstruct(&s).unwrap();
        m.freeze();
        m.freeze();
        assert!(m.is_frozen());
        assert_eq!(m.reconstruct(&s).unwrap(), before);
        assert!(matches!(m.params_mut(), Err(Error::Frozen)));
        let grads: Vec<Tensor<f32>> = m.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(m.apply_gradients(&mut adam, &grads), Err(Error::Frozen)));
        let sample = ShredSample {
            sensors: s,
            target: before,
            weights: None,
        };
        assert!(matches!(
            train_shred(&mut m, &[sample], &[], &ShredTrainConfig::default()),
            Err(Error::Frozen)
        ));
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = ShredModel::<f32>::new(small(ShredMode::Seq2seq), 2).unwrap();
        let orig = m.clone();
        let sample = ShredSample {
            sensors: random(5, 3, 1),
            target: random(5, 20, 2),
            weights: None,
        };
        let cfg = ShredTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let h = train_shred(&mut m, &[sample], &[], &cfg).unwrap();
        assert_eq!(m, orig);
        assert!(h.train.is_empty());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let sample = ShredSample {
            sensors: random(6, 3, 1),
            target: random(6, 20, 2),
            weights: None,
        };
        let cfg = ShredTrainConfig {
            epochs: 5,
            seed: 3,
            ..Default::default()
        };
        let run = || {
            let mut m = ShredModel::<f32>::new(small(ShredMode::Frame), 9).unwrap();
            train_shred(&mut m, std::slice::from_ref(&sample), std::slice::from_ref(&sample), &cfg).unwrap();
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_loss_aborts_with_epoch() {
        let mut target = random(4, 20, 2);
        target.data_mut()[3] = f32::NAN;
        let sample = ShredSample {
            sensors: random(4, 3, 1),
            target,
            weights: None,
        };
        let mut m = ShredModel::<f32>::new(small(ShredMode::Frame), 0).unwrap();
        let err = train_shred(&mut m, &[sample], &[], &ShredTrainConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::Diverged {
                stage: "shred",
                epoch: 0,
                ..
            }
        ));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut m = ShredModel::<f32>::new(small(ShredMode::Seq2seq), 4).unwrap();
        m.freeze();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = ShredModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert!(back.is_frozen());
    }

    #[test]
    fn padding_appends_terminal_copies() {
        let s = random(4, 3, 0);
        assert_eq!(augment_training_padding(&s, 0).unwrap(), s);
        let p = augment_training_padding(&s, 5).unwrap();
        assert_eq!(p.rows(), 9);
        for r in 3..9 {
            assert_eq!(p.row(r), s.row(3));
        }
    }

    #[test]
    fn overfits_one_small_ks_member() {
        let seq = simulate(&SimConfig {
            grid: vec![16, 16],
            frames: 41,
            seed: 5,
            ..SimConfig::ks()
        })
        .unwrap();
        let norm = Normalization::fit([&seq]).unwrap();
        let layout = place_sensors(256, 3, None, 1).unwrap();
        let sample = ShredSample {
            sensors: norm.normalize_sensors(&sample_sensors(&seq, &layout).unwrap(), &layout),
            target: norm.normalize_states(&seq.frames),
            weights: None,
        };
        let cfg = ShredConfig {
            hidden: 32,
            decoder_hidden: vec![128, 128],
            ..ShredConfig::frame(3, 256)
        };
        let mut m = ShredModel::<f32>::new(cfg, 0).unwrap();
        let tc = ShredTrainConfig {
            epochs: 200,
            seed: 0,
            ..Default::default()
        };
        train_shred(&mut m, std::slice::from_ref(&sample), &[], &tc).unwrap();
        let pred = norm.denormalize_states(&m.reconstruct(&sample.sensors).unwrap());
        let e = nrmse(&pred, &seq.frames, None).unwrap();
        assert!(e < 0.05, "train NRMSE {e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn batched_decode_equals_per_row(rows in 1usize..8, seed in 0u64..100) {
            let m = ShredModel::<f32>::new(small(ShredMode::Frame), seed).unwrap();
            let z = random(rows, 8, seed + 1);
            let all = m.decode(&z).unwrap();
            for r in 0..rows {
                let one = m.decode(&z.slice_rows(r, r + 1).unwrap()).unwrap();
                prop_assert_eq!(one.data(), all.row(r));
            }
        }
    }
}
