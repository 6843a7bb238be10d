use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{recon_loss, time_major_steps, History, LatentNormalizer, TemporalTrainConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{gradients_of, Activation, Adam, BoundLstmStack, BoundMlp, BoundVars, LstmStack, Mlp, Params};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    /// Lookback `W`.
    pub window: usize,
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.window == 0 {
            return Err(Error::config("AR dimensions and window must be positive"));
        }
        Ok(())
    }
}

/// Bidirectional LSTM over the lookback window, MLP head on its last output.
/// Operates on normalized latents.
#[derive(Clone, Debug, PartialEq)]
pub struct ARModel<T = f32> {
    pub config: ArConfig,
    core: LstmStack<T>,
    head: Mlp<T>,
    pub normalizer: Option<LatentNormalizer>,
}

#[derive(Clone, Debug)]
pub struct BoundAr {
    core: BoundLstmStack,
    head: BoundMlp,
}

impl BoundVars for BoundAr {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        self.core.collect_vars(out);
        self.head.collect_vars(out);
    }
}

/// Sliding-window pairs: `windows[k]` is `[W, d_z]`, `targets` row `k` its successor.
#[derive(Clone, Debug, PartialEq)]
pub struct ArDataset<T = f32> {
    pub windows: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
}

impl<T> ArDataset<T> {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Every `(z_{t−W+1..t}, z_{t+1})` pair; `T+1−W` per trajectory of `T+1` rows.
pub fn build_ar_dataset<T: Real>(trajectories: &[&Tensor<T>], window: usize) -> Result<ArDataset<T>> {
    if window == 0 {
        return Err(Error::config("AR window must be at least 1"));
    }
    let mut ds = ArDataset {
        windows: Vec::new(),
        targets: Vec::new(),
    };
    for z in trajectories {
        for start in 0..z.rows().saturating_sub(window) {
            ds.windows.push(z.slice_rows(start, start + window)?);
            ds.targets.push(z.slice_rows(start + window, start + window + 1)?);
        }
    }
    Ok(ds)
}

impl<T: Real> ARModel<T> {
    pub fn new(config: ArConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.latent_dim, config.hidden);
        Ok(ARModel {
            core: LstmStack::new(d, h, 1, true, &mut rng),
            head: Mlp::new(&[2 * h, 2 * h, d], Activation::Gelu, false, &mut rng),
            config,
            normalizer: None,
        })
    }

    pub fn zeros(config: ArConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.latent_dim, config.hidden);
        Ok(ARModel {
            core: LstmStack::zeros(d, h, 1, true),
            head: Mlp::zeros(&[2 * h, 2 * h, d], Activation::Gelu, false),
            config,
            normalizer: None,
        })
    }

    pub fn head(&self) -> &Mlp<T> {
        &self.head
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.core.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.core.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundAr {
        BoundAr {
            core: self.core.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    pub fn bind_vars(&self, vars: &mut impl Iterator<Item = Var>) -> BoundAr {
        BoundAr {
            core: self.core.bind_vars(vars),
            head: self.head.bind_vars(vars),
        }
    }

    /// `[B, d_z]` predictions from per-step `[B, d_z]` window latents.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, bound: &BoundAr, steps: &[Var]) -> Result<Var> {
        let out = bound.core.forward(tape, steps)?;
        bound.head.forward(tape, *out.last().expect("window ≥ 1"))
    }

    /// Next normalized latent `[1, d_z]` after a `[W, d_z]` window.
    pub fn ar_step(&self, window: &Tensor<T>) -> Result<Tensor<T>> {
        if window.shape().len() != 2 || window.cols() != self.config.latent_dim || window.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "ar_step",
                left: window.shape().to_vec(),
                right: vec![self.config.window, self.config.latent_dim],
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let steps = time_major_steps(&mut tape, &[window])?;
        let out = self.forward_on_tape(&mut tape, &bound, &steps)?;
        Ok(tape.value(out).clone())
    }

    /// `steps` predictions, each fed back into the sliding window.
    pub fn ar_rollout(&self, seed: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
        if seed.rows() != self.config.window || seed.cols() != self.config.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "ar_rollout",
                left: seed.shape().to_vec(),
                right: vec![self.config.window, self.config.latent_dim],
            });
        }
        let d = self.config.latent_dim;
        let mut window = seed.clone();
        let mut out = Vec::with_capacity(steps * d);
        for _ in 0..steps {
            let next = self.ar_step(&window)?;
            out.extend_from_slice(next.data());
            window = Tensor::vstack(&[&window.slice_rows(1, window.rows())?, &next])?;
        }
        Tensor::new(vec![steps, d], out)
    }

    fn batch_loss(&self, tape: &mut Tape<T>, bound: &BoundAr, ds: &ArDataset<T>, idx: &[usize]) -> Result<Var> {
        let windows: Vec<&Tensor<T>> = idx.iter().map(|&k| &ds.windows[k]).collect();
        let targets: Vec<&Tensor<T>> = idx.iter().map(|&k| &ds.targets[k]).collect();
        let steps = time_major_steps(tape, &windows)?;
        let target = tape.constant(Tensor::vstack(&targets)?);
        let pred = self.forward_on_tape(tape, bound, &steps)?;
        recon_loss(tape, pred, target)
    }

    /// Mean one-step squared error over a dataset.
    pub fn evaluate(&self, ds: &ArDataset<T>, batch_size: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let mut total = 0.0;
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            tape.reset();
            let bound = self.bind(&mut tape, false);
            let l = self.batch_loss(&mut tape, &bound, ds, chunk)?;
            total += tape.value(l).data()[0].to_f64() * chunk.len() as f64;
        }
        Ok(total / ds.len().max(1) as f64)
    }
}

/// Shuffled minibatch Adam on one-step squared error. Keeps the best
/// validation epoch (training loss when there is no validation set).
pub fn train_ar<T: Real>(
    model: &mut ARModel<T>,
    train: &ArDataset<T>,
    validation: &ArDataset<T>,
    cfg: &TemporalTrainConfig,
) -> Result<History> {
    if train.is_empty() {
        return Err(Error::config("no AR training pairs"));
    }
    if train
        .windows
        .iter()
        .chain(&validation.windows)
        .any(|w| w.rows() != model.config.window)
    {
        return Err(Error::config("AR windows must match the model lookback"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut history = History::default();
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            tape.reset();
            let bound = model.bind(&mut tape, true);
            let loss = model.batch_loss(&mut tape, &bound, train, chunk)?;
            let value = tape.value(loss).data()[0].to_f64();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "ar",
                    epoch,
                    loss: value,
                });
            }
            epoch_loss += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let g = gradients_of(&tape, &grads, &bound);
            adam.step(&mut model.params_mut(), &g)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        history.train.push(train_loss);
        let score = if validation.is_empty() {
            train_loss
        } else {
            let v = model.evaluate(validation, cfg.batch_size)?;
            history.validation.push(v);
            v
        };
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.params().into_iter().cloned().collect()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("ar: early stop at epoch {epoch}");
                break;
            }
        }
        if epoch % 50 == 0 {
            log::debug!("ar epoch {epoch}: train {train_loss:.6e} score {score:.6e}");
        }
    }
    if let Some((_, weights)) = best {
        for (p, w) in model.params_mut().into_iter().zip(weights) {
            *p = w;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::gradcheck;
    use crate::nn::leaves;
    use proptest::prelude::*;

    fn cfg(d: usize, h: usize, w: usize) -> ArConfig {
        ArConfig {
            latent_dim: d,
            hidden: h,
            window: w,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[rows, cols], 1.0, &mut rng)
    }

    #[test]
    fn zero_model_returns_head_bias() {
        let mut m = ARModel::<f64>::zeros(cfg(3, 4, 2)).unwrap();
        let last = m.params_mut().pop().unwrap();
        last.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let out = m.ar_step(&random(2, 3, 1)).unwrap();
        assert_eq!(out.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn step_width_is_latent_dim_for_any_window() {
        let m = ARModel::<f64>::new(cfg(5, 4, 3), 0).unwrap();
        for w in [1, 3, 9] {
            assert_eq!(m.ar_step(&random(w, 5, w as u64)).unwrap().shape(), &[1, 5]);
        }
    }

    #[test]
    fn rollout_edges() {
        let m = ARModel::<f64>::new(cfg(3, 4, 2), 1).unwrap();
        let seed = random(2, 3, 2);
        assert_eq!(m.ar_rollout(&seed, 0).unwrap().shape(), &[0, 3]);
        assert_eq!(m.ar_rollout(&seed, 1).unwrap(), m.ar_step(&seed).unwrap());
        assert!(m.ar_rollout(&random(3, 3, 0), 2).is_err());
    }

    #[test]
    fn dataset_edge_counts() {
        let z = random(4, 2, 0);
        assert_eq!(build_ar_dataset(&[&z], 3).unwrap().len(), 1);
        assert_eq!(build_ar_dataset(&[&z], 4).unwrap().len(), 0);
        let ds = build_ar_dataset(&[&z], 2).unwrap();
        assert_eq!(ds.windows[1].row(0), z.row(1));
        assert_eq!(ds.targets[1].row(0), z.row(3));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = ARModel::<f64>::new(cfg(6, 8, 4), 3).unwrap();
        let ds = build_ar_dataset(&[&random(12, 6, 4)], 4).unwrap();
        let inputs: Vec<Tensor<f64>> = m.params().into_iter().cloned().collect();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let check = gradcheck(&inputs, 1e-5, |tape, vars| {
            let bound = m.bind_vars(&mut vars.iter().copied());
            m.batch_loss(tape, &bound, &ds, &idx)
        })
        .unwrap();
        assert!(check.max_rel_error() < 1e-4, "{:?}", check.rel_errors);
        let mut tape = Tape::new();
        assert_eq!(leaves(&mut tape, &m.params(), true).len(), inputs.len());
    }

    #[test]
    fn constant_trajectory_is_a_learned_fixed_point() {
        let c = [0.7f64, -0.3, 1.1];
        let z = Tensor::new(vec![30, 3], c.repeat(30)).unwrap();
        let ds = build_ar_dataset(&[&z], 3).unwrap();
        let mut m = ARModel::<f64>::new(cfg(3, 6, 3), 5).unwrap();
        let tc = TemporalTrainConfig {
            epochs: 400,
            patience: 400,
            batch_size: 32,
            ..Default::default()
        };
        train_ar(
            &mut m,
            &ds,
            &ArDataset {
                windows: vec![],
                targets: vec![],
            },
            &tc,
        )
        .unwrap();
        let out = m.ar_rollout(&z.slice_rows(0, 3).unwrap(), 5).unwrap();
        for r in 0..5 {
            for (a, b) in out.row(r).iter().zip(&c) {
                assert!((a - b).abs() < 2e-2, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn training_is_seed_deterministic_and_zero_epochs_is_identity() {
        let z = random(20, 3, 9);
        let ds = build_ar_dataset(&[&z], 2).unwrap();
        let empty = ArDataset {
            windows: vec![],
            targets: vec![],
        };
        let base = ARModel::<f64>::new(cfg(3, 4, 2), 2).unwrap();
        let mut idle = base.clone();
        let tc0 = TemporalTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        train_ar(&mut idle, &ds, &empty, &tc0).unwrap();
        assert_eq!(idle, base);
        let tc = TemporalTrainConfig {
            epochs: 5,
            batch_size: 4,
            seed: 11,
            ..Default::default()
        };
        let (mut a, mut b) = (base.clone(), base);
        train_ar(&mut a, &ds, &empty, &tc).unwrap();
        train_ar(&mut b, &ds, &empty, &tc).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn pair_count_matches_enumeration(lens in proptest::collection::vec(1usize..20, 1..5), w in 1usize..8) {
            let trajs: Vec<Tensor<f64>> = lens.iter().map(|&l| Tensor::zeros(&[l, 2])).collect();
            let refs: Vec<&Tensor<f64>> = trajs.iter().collect();
            let mut brute = 0;
            for &l in &lens {
                for t in 0..l {
                    if t + w < l {
                        brute += 1;
                    }
                }
            }
            prop_assert_eq!(build_ar_dataset(&refs, w).unwrap().len(), brute);
        }

        #[test]
        fn rollout_prefix_is_exact(k in 0usize..6, extra in 0usize..6, seed in 0u64..50) {
            let m = ARModel::<f32>::new(cfg(3, 4, 2), seed).unwrap();
            let s = random(2, 3, seed).cast::<f32>();
            let short = m.ar_rollout(&s, k).unwrap();
            let long = m.ar_rollout(&s, k + extra).unwrap();
            prop_assert_eq!(short.data(), &long.data()[..k * 3]);
        }
    }
}
