use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{recon_loss, shape_loss, stack_time_major, time_major_steps, Direction, History, TemporalTrainConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{gradients_of, Activation, Adam, BoundLinear, BoundLstmStack, BoundMlp, BoundVars, Linear, LstmStack, Mlp, Params};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub latent_dim: usize,
    /// Hidden width of the compress, generator and refiner LSTMs.
    pub hidden: usize,
    /// Observed window length `W+1`.
    pub observed: usize,
    /// Generated length; fixed at training time.
    pub out_len: usize,
    pub direction: Direction,
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.observed == 0 || self.out_len == 0 {
            return Err(Error::config("seq2seq dimensions must be positive"));
        }
        Ok(())
    }
}

/// Window compressor, positional projection, bidirectional generator,
/// unidirectional refiner and per-step head.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqTemporalModel<T = f32> {
    pub config: Seq2SeqConfig,
    compress: LstmStack<T>,
    readout: Linear<T>,
    proj: Linear<T>,
    generator: LstmStack<T>,
    refiner: LstmStack<T>,
    head: Mlp<T>,
}

#[derive(Clone, Debug)]
pub struct BoundSeq2Seq {
    compress: BoundLstmStack,
    readout: BoundLinear,
    proj: BoundLinear,
    generator: BoundLstmStack,
    refiner: BoundLstmStack,
    head: BoundMlp,
}

impl BoundVars for BoundSeq2Seq {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        self.compress.collect_vars(out);
        self.readout.collect_vars(out);
        self.proj.collect_vars(out);
        self.generator.collect_vars(out);
        self.refiner.collect_vars(out);
        self.head.collect_vars(out);
    }
}

/// One training pair: observed latents `[W+1, d_z]`, target `[T_out, d_z]`.
#[derive(Clone, Debug)]
pub struct Seq2SeqExample<T = f32> {
    pub observed: Tensor<T>,
    pub target: Tensor<T>,
}

/// `t/(T_out−1)` for each output step; `[0]` when `T_out = 1`.
pub fn positional_values(out_len: usize) -> Vec<f64> {
    if out_len == 1 {
        return vec![0.0];
    }
    (0..out_len).map(|t| t as f64 / (out_len - 1) as f64).collect()
}

impl<T: Real> Seq2SeqTemporalModel<T> {
    pub fn new(config: Seq2SeqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.latent_dim, config.hidden);
        Ok(Seq2SeqTemporalModel {
            compress: LstmStack::new(d, h, 1, true, &mut rng),
            readout: Linear::new(2 * h, d, &mut rng),
            proj: Linear::new(d + 1, d, &mut rng),
            generator: LstmStack::new(d, h, 1, true, &mut rng),
            refiner: LstmStack::new(2 * h, h, 1, false, &mut rng),
            head: Mlp::new(&[h, h, d], Activation::Gelu, true, &mut rng),
            config,
        })
    }

    pub fn zeros(config: Seq2SeqConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.latent_dim, config.hidden);
        Ok(Seq2SeqTemporalModel {
            compress: LstmStack::zeros(d, h, 1, true),
            readout: Linear::zeros(2 * h, d),
            proj: Linear::zeros(d + 1, d),
            generator: LstmStack::zeros(d, h, 1, true),
            refiner: LstmStack::zeros(2 * h, h, 1, false),
            head: Mlp::zeros(&[h, h, d], Activation::Gelu, true),
            config,
        })
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.compress.params();
        p.extend(self.readout.params());
        p.extend(self.proj.params());
        p.extend(self.generator.params());
        p.extend(self.refiner.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.compress.params_mut();
        p.extend(self.readout.params_mut());
        p.extend(self.proj.params_mut());
        p.extend(self.generator.params_mut());
        p.extend(self.refiner.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundSeq2Seq {
        BoundSeq2Seq {
            compress: self.compress.bind(tape, trainable),
            readout: self.readout.bind(tape, trainable),
            proj: self.proj.bind(tape, trainable),
            generator: self.generator.bind(tape, trainable),
            refiner: self.refiner.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    /// Rebinds the architecture onto externally created vars, in `params()` order.
    pub fn bind_vars(&self, vars: &mut impl Iterator<Item = Var>) -> BoundSeq2Seq {
        BoundSeq2Seq {
            compress: self.compress.bind_vars(vars),
            readout: self.readout.bind_vars(vars),
            proj: self.proj.bind_vars(vars),
            generator: self.generator.bind_vars(vars),
            refiner: self.refiner.bind_vars(vars),
            head: self.head.bind_vars(vars),
        }
    }

    fn check_latents(&self, z: &Tensor<T>, op: &'static str) -> Result<()> {
        if z.shape().len() != 2 || z.cols() != self.config.latent_dim || z.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op,
                left: z.shape().to_vec(),
                right: vec![0, self.config.latent_dim],
            });
        }
        Ok(())
    }

    /// Summary `[B, d_z]` from per-step `[B, d_z]` observed latents.
    pub fn compress_on_tape(&self, tape: &mut Tape<T>, bound: &BoundSeq2Seq, observed: &[Var]) -> Result<Var> {
        let h = self.config.hidden;
        let out = bound.compress.forward(tape, observed)?;
        let fwd_last = tape.slice_cols(*out.last().expect("non-empty window"), 0, h)?;
        let bwd_first = tape.slice_cols(out[0], h, 2 * h)?;
        let summary = tape.concat_cols(&[fwd_last, bwd_first])?;
        bound.readout.forward(tape, summary)
    }

    /// Time-major `[T_out·B, d_z]` generated latents.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, bound: &BoundSeq2Seq, observed: &[Var], out_len: usize) -> Result<Var> {
        let summary = self.compress_on_tape(tape, bound, observed)?;
        let batch = tape.value(summary).rows();
        let inputs: Vec<Var> = positional_values(out_len)
            .into_iter()
            .map(|pos| {
                let p = tape.constant(Tensor::full(&[batch, 1], T::from_f64(pos)));
                let x = tape.concat_cols(&[summary, p])?;
                bound.proj.forward(tape, x)
            })
            .collect::<Result<_>>()?;
        let generated = bound.generator.forward(tape, &inputs)?;
        let refined = bound.refiner.forward(tape, &generated)?;
        let stacked = tape.concat_rows(&refined)?;
        bound.head.forward(tape, stacked)
    }

    /// Fixed-width summary `[1, d_z]` of a `[W+1, d_z]` window.
    pub fn compress_window(&self, observed: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latents(observed, "compress_window")?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let steps = time_major_steps(&mut tape, &[observed])?;
        let s = self.compress_on_tape(&mut tape, &bound, &steps)?;
        Ok(tape.value(s).clone())
    }

    /// Projected generator inputs `[T_out, d_z]` for a `[1, d_z]` summary.
    pub fn positional_augment(&self, summary: &Tensor<T>, out_len: usize) -> Result<Tensor<T>> {
        if out_len == 0 {
            return Err(Error::config("output length must be at least 1"));
        }
        let rows: Vec<Vec<T>> = positional_values(out_len)
            .into_iter()
            .map(|pos| {
                let mut r = summary.row(0).to_vec();
                r.push(T::from_f64(pos));
                r
            })
            .collect();
        self.proj.forward_value(&Tensor::from_rows(&rows)?)
    }

    /// The unobserved latent segment `[T_out, d_z]` in one pass.
    pub fn generate(&self, observed: &Tensor<T>, out_len: usize) -> Result<Tensor<T>> {
        if out_len != self.config.out_len {
            return Err(Error::config(format!(
                "model was trained for {} output steps, asked for {out_len}",
                self.config.out_len
            )));
        }
        self.generate_unchecked(observed, out_len)
    }

    /// [`Self::generate`] without the trained-length check.
    pub fn generate_unchecked(&self, observed: &Tensor<T>, out_len: usize) -> Result<Tensor<T>> {
        self.check_latents(observed, "temporal_generate")?;
        if out_len == 0 {
            return Err(Error::config("output length must be at least 1"));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let steps = time_major_steps(&mut tape, &[observed])?;
        let out = self.forward_on_tape(&mut tape, &bound, &steps, out_len)?;
        Ok(tape.value(out).clone())
    }

    /// `λ_r·recon + λ_s·shape` over a batch sharing `W+1` and `T_out`.
    pub fn loss_on_tape(&self, tape: &mut Tape<T>, bound: &BoundSeq2Seq, batch: &[&Seq2SeqExample<T>], lambdas: (f64, f64)) -> Result<Var> {
        let observed: Vec<&Tensor<T>> = batch.iter().map(|e| &e.observed).collect();
        let targets: Vec<&Tensor<T>> = batch.iter().map(|e| &e.target).collect();
        let steps = time_major_steps(tape, &observed)?;
        let target = tape.constant(stack_time_major(&targets)?);
        let out_len = targets[0].rows();
        let pred = self.forward_on_tape(tape, bound, &steps, out_len)?;
        let r = recon_loss(tape, pred, target)?;
        let r = tape.scale(r, T::from_f64(lambdas.0));
        if lambdas.1 == 0.0 {
            return Ok(r);
        }
        let s = shape_loss(tape, pred, target, batch.len())?;
        let s = tape.scale(s, T::from_f64(lambdas.1));
        tape.add(r, s)
    }

    pub fn evaluate(&self, batch: &[Seq2SeqExample<T>], lambdas: (f64, f64)) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let refs: Vec<&Seq2SeqExample<T>> = batch.iter().collect();
        let l = self.loss_on_tape(&mut tape, &bound, &refs, lambdas)?;
        Ok(tape.value(l).data()[0].to_f64())
    }
}

fn check_examples<T: Real>(model: &Seq2SeqTemporalModel<T>, examples: &[Seq2SeqExample<T>]) -> Result<()> {
    for e in examples {
        model.check_latents(&e.observed, "seq2seq observed")?;
        model.check_latents(&e.target, "seq2seq target")?;
        if e.target.rows() != model.config.out_len || e.observed.rows() != examples[0].observed.rows() {
            return Err(Error::config("seq2seq examples must share the window and output lengths"));
        }
    }
    Ok(())
}

/// Full-batch Adam on `λ_r·recon + λ_s·shape`. Keeps the best validation
/// epoch (training loss when there is no validation set).
pub fn train_seq2seq<T: Real>(
    model: &mut Seq2SeqTemporalModel<T>,
    train: &[Seq2SeqExample<T>],
    validation: &[Seq2SeqExample<T>],
    cfg: &TemporalTrainConfig,
) -> Result<History> {
    if train.is_empty() {
        return Err(Error::config("no temporal training examples"));
    }
    check_examples(model, train)?;
    check_examples(model, validation)?;
    let lambdas = (cfg.lambda_recon, cfg.lambda_shape);
    let refs: Vec<&Seq2SeqExample<T>> = train.iter().collect();
    let mut adam = Adam::new(cfg.adam);
    let mut history = History::default();
    let mut best: Option<(f64, Vec<Tensor<T>>)> = None;
    let mut since_best = 0;
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        tape.reset();
        let bound = model.bind(&mut tape, true);
        let loss = model.loss_on_tape(&mut tape, &bound, &refs, lambdas)?;
        let value = tape.value(loss).data()[0].to_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                stage: "temporal",
                epoch,
                loss: value,
            });
        }
        history.train.push(value);
        // Both scores refer to the weights before this epoch's step.
        let score = if validation.is_empty() {
            value
        } else {
            let v = model.evaluate(validation, lambdas)?;
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
                log::info!("temporal: early stop at epoch {epoch}");
                break;
            }
        }
        let grads = tape.backward(loss)?;
        let g = gradients_of(&tape, &grads, &bound);
        adam.step(&mut model.params_mut(), &g)?;
        if epoch % 100 == 0 {
            log::debug!("temporal epoch {epoch}: train {value:.6e} score {score:.6e}");
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

    fn cfg(d: usize, h: usize, obs: usize, out: usize) -> Seq2SeqConfig {
        Seq2SeqConfig {
            latent_dim: d,
            hidden: h,
            observed: obs,
            out_len: out,
            direction: Direction::Backward,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[rows, cols], 1.0, &mut rng)
    }

    fn example(obs: usize, out: usize, d: usize, seed: u64) -> Seq2SeqExample<f64> {
        Seq2SeqExample {
            observed: random(obs, d, seed),
            target: random(out, d, seed + 1000),
        }
    }

    #[test]
    fn positions_span_unit_interval() {
        assert_eq!(positional_values(1), vec![0.0]);
        let p = positional_values(5);
        assert_eq!((p[0], p[4]), (0.0, 1.0));
        assert!(p.windows(2).all(|w| (w[1] - w[0] - 0.25).abs() < 1e-15));
    }

    #[test]
    fn summary_width_is_fixed_and_order_sensitive() {
        let m = Seq2SeqTemporalModel::<f64>::new(cfg(5, 6, 3, 4), 0).unwrap();
        for w in [1, 5, 14] {
            assert_eq!(m.compress_window(&random(w, 5, w as u64)).unwrap().shape(), &[1, 5]);
        }
        let x = random(4, 5, 7);
        let mut rev = Vec::new();
        for r in (0..4).rev() {
            rev.extend_from_slice(x.row(r));
        }
        let y = Tensor::new(vec![4, 5], rev).unwrap();
        assert_ne!(m.compress_window(&x).unwrap(), m.compress_window(&y).unwrap());
        let z = Seq2SeqTemporalModel::<f64>::zeros(cfg(5, 6, 3, 4)).unwrap();
        assert!(z.compress_window(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn augment_rows_follow_position() {
        let m = Seq2SeqTemporalModel::<f64>::new(cfg(3, 4, 2, 5), 1).unwrap();
        let s = random(1, 3, 2);
        let a = m.positional_augment(&s, 5).unwrap();
        assert_eq!(a.shape(), &[5, 3]);
        // Proj is affine and the position is the only varying input.
        let d: Vec<f64> = (0..3).map(|j| a.row(1)[j] - a.row(0)[j]).collect();
        for t in 2..5 {
            for j in 0..3 {
                assert!((a.row(t)[j] - a.row(t - 1)[j] - d[j]).abs() < 1e-12);
            }
        }
        assert_eq!(m.positional_augment(&s, 1).unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn generate_shapes_and_determinism() {
        let m = Seq2SeqTemporalModel::<f64>::new(cfg(4, 5, 3, 7), 2).unwrap();
        let obs = random(3, 4, 3);
        let a = m.generate(&obs, 7).unwrap();
        assert_eq!(a.shape(), &[7, 4]);
        assert_eq!(a, m.generate(&obs, 7).unwrap());
        assert!(m.generate(&obs, 6).is_err());
        for t in [1, 2, 30] {
            assert_eq!(m.generate_unchecked(&obs, t).unwrap().shape(), &[t, 4]);
        }
    }

    #[test]
    fn batched_forward_matches_single() {
        let m = Seq2SeqTemporalModel::<f64>::new(cfg(4, 5, 3, 6), 4).unwrap();
        let (a, b) = (random(3, 4, 1), random(3, 4, 2));
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let steps = time_major_steps(&mut tape, &[&a, &b]).unwrap();
        let out = m.forward_on_tape(&mut tape, &bound, &steps, 6).unwrap();
        let split = super::super::unstack_time_major(tape.value(out), 2);
        for (got, obs) in split.iter().zip([&a, &b]) {
            let single = m.generate(obs, 6).unwrap();
            for (x, y) in got.data().iter().zip(single.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_graph_gradients_match_finite_differences() {
        let m = Seq2SeqTemporalModel::<f64>::new(cfg(6, 8, 4, 12), 5).unwrap();
        let batch = [example(4, 12, 6, 1), example(4, 12, 6, 2)];
        let refs: Vec<&Seq2SeqExample<f64>> = batch.iter().collect();
        let inputs: Vec<Tensor<f64>> = m.params().into_iter().cloned().collect();
        let check = gradcheck(&inputs, 1e-5, |tape, vars| {
            let bound = m.bind_vars(&mut vars.iter().copied());
            m.loss_on_tape(tape, &bound, &refs, (1.0, 0.1))
        })
        .unwrap();
        assert!(check.max_rel_error() < 1e-4, "{:?}", check.rel_errors);
    }

    #[test]
    fn zero_shape_weight_gives_recon_gradient() {
        let m = Seq2SeqTemporalModel::<f64>::new(cfg(4, 5, 3, 6), 6).unwrap();
        let ex = example(3, 6, 4, 9);
        let grad = |lambdas: (f64, f64), explicit: bool| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape, true);
            let loss = if explicit {
                let steps = time_major_steps(&mut tape, &[&ex.observed]).unwrap();
                let t = tape.constant(ex.target.clone());
                let p = m.forward_on_tape(&mut tape, &bound, &steps, 6).unwrap();
                recon_loss(&mut tape, p, t).unwrap()
            } else {
                m.loss_on_tape(&mut tape, &bound, &[&ex], lambdas).unwrap()
            };
            let g = tape.backward(loss).unwrap();
            gradients_of(&tape, &g, &bound)
        };
        assert_eq!(grad((1.0, 0.0), false), grad((0.0, 0.0), true));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut m = Seq2SeqTemporalModel::<f64>::new(cfg(3, 4, 2, 5), 7).unwrap();
        let before = m.clone();
        let tc = TemporalTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        train_seq2seq(&mut m, &[example(2, 5, 3, 1)], &[], &tc).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn single_trajectory_overfits() {
        let mut m = Seq2SeqTemporalModel::<f64>::new(cfg(4, 12, 3, 8), 8).unwrap();
        let mut ex = example(3, 8, 4, 2);
        ex.target = ex.target.map(|v| 0.5 * v);
        let tc = TemporalTrainConfig {
            epochs: 1500,
            patience: 1500,
            adam: crate::nn::AdamConfig {
                lr: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        train_seq2seq(&mut m, std::slice::from_ref(&ex), &[], &tc).unwrap();
        let loss = m.evaluate(std::slice::from_ref(&ex), (1.0, 0.1)).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let base = Seq2SeqTemporalModel::<f64>::new(cfg(3, 4, 2, 5), 9).unwrap();
        let data = [example(2, 5, 3, 1), example(2, 5, 3, 2)];
        let tc = TemporalTrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let (mut a, mut b) = (base.clone(), base);
        train_seq2seq(&mut a, &data, &data[..1], &tc).unwrap();
        train_seq2seq(&mut b, &data, &data[..1], &tc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut m = Seq2SeqTemporalModel::<f64>::new(cfg(3, 4, 2, 5), 9).unwrap();
        let bad = [example(2, 4, 3, 1)];
        assert!(train_seq2seq(&mut m, &bad, &[], &TemporalTrainConfig::default()).is_err());
    }
}
