use rand::Rng;

use super::{BoundVars, Params};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Gate weights of one scan direction. Gate order along columns: input,
/// forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirection<T> {
    /// `[d_in, 4·d_h]`
    pub w_ih: Tensor<T>,
    /// `[d_h, 4·d_h]`
    pub w_hh: Tensor<T>,
    /// `[1, 4·d_h]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer<T> {
    pub forward: LstmDirection<T>,
    pub backward: Option<LstmDirection<T>>,
}

/// Multi-layer (optionally bidirectional) LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStack<T> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub bidirectional: bool,
    pub layers: Vec<LstmLayer<T>>,
}

#[derive(Clone, Copy, Debug)]
struct BoundDirection {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
}

#[derive(Clone, Debug)]
pub struct BoundLstmStack {
    hidden_dim: usize,
    layers: Vec<(BoundDirection, Option<BoundDirection>)>,
}

impl<T: Real> LstmDirection<T> {
    fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Tensor::uniform(&[1, 4 * hidden], bound, rng);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = T::ONE;
        }
        LstmDirection {
            w_ih: Tensor::uniform(&[input, 4 * hidden], bound, rng),
            w_hh: Tensor::uniform(&[hidden, 4 * hidden], bound, rng),
            bias,
        }
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        LstmDirection {
            w_ih: Tensor::zeros(&[input, 4 * hidden]),
            w_hh: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[1, 4 * hidden]),
        }
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundDirection {
        BoundDirection {
            w_ih: tape.leaf(self.w_ih.clone(), trainable),
            w_hh: tape.leaf(self.w_hh.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

impl<T: Real> LstmStack<T> {
    /// Gate weights uniform in ±1/sqrt(d_h), forget-gate bias fixed at +1.
    pub fn new<R: Rng>(input_dim: usize, hidden_dim: usize, num_layers: usize, bidirectional: bool, rng: &mut R) -> Self {
        Self::build(input_dim, hidden_dim, num_layers, bidirectional, |i, h| {
            LstmDirection::new(i, h, rng)
        })
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, num_layers: usize, bidirectional: bool) -> Self {
        Self::build(input_dim, hidden_dim, num_layers, bidirectional, |i, h| LstmDirection::zeros(i, h))
    }

    fn build(
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        bidirectional: bool,
        mut make: impl FnMut(usize, usize) -> LstmDirection<T>,
    ) -> Self {
        assert!(num_layers >= 1 && hidden_dim >= 1 && input_dim >= 1);
        let width = if bidirectional { 2 * hidden_dim } else { hidden_dim };
        let layers = (0..num_layers)
            .map(|k| {
                let d_in = if k == 0 { input_dim } else { width };
                let forward = make(d_in, hidden_dim);
                let backward = bidirectional.then(|| make(d_in, hidden_dim));
                LstmLayer { forward, backward }
            })
            .collect();
        LstmStack {
            input_dim,
            hidden_dim,
            bidirectional,
            layers,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-step output width: `d_h`, or `2·d_h` when bidirectional.
    pub fn output_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundLstmStack {
        BoundLstmStack {
            hidden_dim: self.hidden_dim,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        l.forward.bind(tape, trainable),
                        l.backward.as_ref().map(|b| b.bind(tape, trainable)),
                    )
                })
                .collect(),
        }
    }

    /// Bind to existing vars taken in `params()` order.
    pub fn bind_vars(&self, vars: &mut impl Iterator<Item = Var>) -> BoundLstmStack {
        let mut next = || BoundDirection {
            w_ih: vars.next().expect("lstm w_ih var"),
            w_hh: vars.next().expect("lstm w_hh var"),
            bias: vars.next().expect("lstm bias var"),
        };
        BoundLstmStack {
            hidden_dim: self.hidden_dim,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let f = next();
                    let b = l.backward.as_ref().map(|_| next());
                    (f, b)
                })
                .collect(),
        }
    }

    /// Tape-free convenience: run over a `[L, d_in]` sequence and return the
    /// `[L, d_out]` hidden sequence.
    pub fn run(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let inputs = super::split_rows(&mut tape, seq);
        let out = bound.forward(&mut tape, &inputs)?;
        let joined = tape.concat_rows(&out)?;
        Ok(tape.value(joined).clone())
    }
}

impl BoundLstmStack {
    /// Run the stack over a sequence of `[B, d_in]` steps.
    ///
    /// Bidirectional layers scan `t = 0..L` forward and `t = L-1..0`
    /// backward, concatenating `[h_fwd(t), h_bwd(t)]` at every step.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, seq: &[Var]) -> Result<Vec<Var>> {
        if seq.is_empty() {
            return Err(Error::config("LSTM input sequence is empty"));
        }
        let mut current = seq.to_vec();
        for (fwd, bwd) in &self.layers {
            let in_width = tape.shape(fwd.w_ih)[0];
            let got = tape.value(current[0]).cols();
            if got != in_width {
                return Err(Error::ShapeMismatch {
                    op: "lstm input",
                    left: tape.shape(current[0]).to_vec(),
                    right: tape.shape(fwd.w_ih).to_vec(),
                });
            }
            let forward_out = self.scan(tape, fwd, &current, false)?;
            current = match bwd {
                None => forward_out,
                Some(b) => {
                    let backward_out = self.scan(tape, b, &current, true)?;
                    forward_out
                        .iter()
                        .zip(&backward_out)
                        .map(|(&f, &b)| tape.concat_cols(&[f, b]))
                        .collect::<Result<_>>()?
                }
            };
        }
        Ok(current)
    }

    /// One direction of one layer. Outputs are returned in input order.
    fn scan<T: Real>(&self, tape: &mut Tape<T>, dir: &BoundDirection, seq: &[Var], reverse: bool) -> Result<Vec<Var>> {
        let len = seq.len();
        let mut out = vec![None; len];
        let mut state: Option<(Var, Var)> = None;
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let (h, c) = self.cell(tape, dir, seq[t], state)?;
            out[t] = Some(h);
            state = Some((h, c));
        }
        Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
    }

    /// Single LSTM cell update. A missing state means zero `h` and `c`.
    fn cell<T: Real>(&self, tape: &mut Tape<T>, dir: &BoundDirection, x: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let h = self.hidden_dim;
        let mut gates = tape.linear(x, dir.w_ih, dir.bias)?;
        if let Some((h_prev, _)) = state {
            let rec = tape.matmul(h_prev, dir.w_hh)?;
            gates = tape.add(gates, rec)?;
        }
        let i = tape.slice_cols(gates, 0, h)?;
        let f = tape.slice_cols(gates, h, 2 * h)?;
        let g = tape.slice_cols(gates, 2 * h, 3 * h)?;
        let o = tape.slice_cols(gates, 3 * h, 4 * h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let ig = tape.mul(i, g)?;
        let c = match state {
            Some((_, c_prev)) => {
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c))
    }
}

impl BoundVars for BoundLstmStack {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        for (f, b) in &self.layers {
            out.extend([f.w_ih, f.w_hh, f.bias]);
            if let Some(b) = b {
                out.extend([b.w_ih, b.w_hh, b.bias]);
            }
        }
    }
}

impl<T: Real> Params<T> for LstmStack<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.forward.w_ih, &l.forward.w_hh, &l.forward.bias]);
            if let Some(b) = &l.backward {
                out.extend([&b.w_ih, &b.w_hh, &b.bias]);
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend([&mut l.forward.w_ih, &mut l.forward.w_hh, &mut l.forward.bias]);
            if let Some(b) = &mut l.backward {
                out.extend([&mut b.w_ih, &mut b.w_hh, &mut b.bias]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_give_zero_hiddens() {
        let stack = LstmStack::<f64>::zeros(3, 4, 2, true);
        let seq = Tensor::uniform(&[6, 3], 2.0, &mut rng(1));
        let out = stack.run(&seq).unwrap();
        assert_eq!(out.shape(), &[6, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_cell() {
        let stack = LstmStack::<f64>::new(2, 3, 1, false, &mut rng(2));
        let x = Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let out = stack.run(&x).unwrap();
        let d = &stack.layers[0].forward;
        let gates = x.matmul(&d.w_ih).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..3 {
            let pre = |k: usize| gates.data()[k * 3 + j] + d.bias.data()[k * 3 + j];
            let c = sig(pre(0)) * pre(2).tanh();
            let h = sig(pre(3)) * c.tanh();
            assert!((out.data()[j] - h).abs() < 1e-14);
        }
    }

    #[test]
    fn bidirectional_width_is_twice_hidden() {
        for len in [1, 2, 9] {
            let stack = LstmStack::<f32>::new(4, 5, 1, true, &mut rng(3));
            let seq = Tensor::uniform(&[len, 4], 1.0, &mut rng(4));
            assert_eq!(stack.run(&seq).unwrap().shape(), &[len, 10]);
        }
    }

    #[test]
    fn reversing_input_swaps_halves_with_tied_directions() {
        let mut stack = LstmStack::<f64>::new(3, 4, 1, true, &mut rng(5));
        let fwd = stack.layers[0].forward.clone();
        stack.layers[0].backward = Some(fwd);
        let seq = Tensor::uniform(&[7, 3], 2.0, &mut rng(6));
        let mut rev_rows: Vec<Vec<f64>> = (0..7).map(|r| seq.row(r).to_vec()).collect();
        rev_rows.reverse();
        let rev = Tensor::from_rows(&rev_rows).unwrap();
        let a = stack.run(&seq).unwrap();
        let b = stack.run(&rev).unwrap();
        for t in 0..7 {
            let ra = a.row(t);
            let rb = b.row(6 - t);
            assert_eq!(&ra[..4], &rb[4..]);
            assert_eq!(&ra[4..], &rb[..4]);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let stack = LstmStack::<f64>::new(3, 4, 1, false, &mut rng(7));
        let seq = Tensor::zeros(&[2, 5]);
        assert!(stack.run(&seq).is_err());
    }

    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let stack = LstmStack::<f64>::new(3, 4, 2, true, &mut rng(8));
        let seq = Tensor::uniform(&[7, 3], 2.0, &mut rng(9));
        let mut inputs: Vec<Tensor<f64>> = stack.params().into_iter().cloned().collect();
        inputs.push(seq);
        let template = stack.clone();
        let report = gradcheck(&inputs, 1e-5, |tape, vars| {
            let (params, x) = vars.split_at(vars.len() - 1);
            let bound = template.bind_vars(&mut params.iter().copied());
            let steps: Vec<Var> = (0..7).map(|r| tape.slice_rows(x[0], r, r + 1)).collect::<Result<_>>()?;
            let out = bound.forward(tape, &steps)?;
            let all = tape.concat_rows(&out)?;
            Ok(tape.sum(all))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }
}
