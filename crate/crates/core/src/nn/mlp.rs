use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoundLayerNorm, BoundLinear, BoundVars, LayerNorm, Linear, Params};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Tanh,
    Identity,
}

/// Feedforward stack: each hidden layer is affine → (layer norm) →
/// activation; the final layer is affine only.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub activation: Activation,
    pub layers: Vec<Linear<T>>,
    /// One per hidden layer when normalization is enabled, else empty.
    pub norms: Vec<LayerNorm<T>>,
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    activation: Activation,
    layers: Vec<BoundLinear>,
    norms: Vec<BoundLayerNorm>,
}

impl<T: Real> Mlp<T> {
    /// `widths = [in, hidden.., out]`.
    pub fn new<R: Rng>(widths: &[usize], activation: Activation, layer_norm: bool, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers: Vec<Linear<T>> = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self::assemble(widths, activation, layer_norm, layers)
    }

    pub fn zeros(widths: &[usize], activation: Activation, layer_norm: bool) -> Self {
        let layers = widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self::assemble(widths, activation, layer_norm, layers)
    }

    fn assemble(widths: &[usize], activation: Activation, layer_norm: bool, layers: Vec<Linear<T>>) -> Self {
        let norms = if layer_norm {
            widths[1..widths.len() - 1].iter().map(|&w| LayerNorm::new(w)).collect()
        } else {
            Vec::new()
        };
        Mlp { activation, layers, norms }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].input_dim()];
        w.extend(self.layers.iter().map(|l| l.output_dim()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn has_layer_norm(&self) -> bool {
        !self.norms.is_empty()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundMlp {
        BoundMlp {
            activation: self.activation,
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            norms: self.norms.iter().map(|n| n.bind(tape, trainable)).collect(),
        }
    }

    /// Bind to existing vars taken in `params()` order.
    pub fn bind_vars(&self, vars: &mut impl Iterator<Item = Var>) -> BoundMlp {
        BoundMlp {
            activation: self.activation,
            layers: self.layers.iter().map(|l| l.bind_vars(vars)).collect(),
            norms: self.norms.iter().map(|n| n.bind_vars(vars)).collect(),
        }
    }

    /// Tape-free forward pass on a `[rows, in]` matrix.
    pub fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = bound.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl BoundMlp {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let expected = tape.shape(self.layers[0].w)[0];
        if tape.value(x).cols() != expected {
            return Err(Error::ShapeMismatch {
                op: "mlp input",
                left: tape.shape(x).to_vec(),
                right: tape.shape(self.layers[0].w).to_vec(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if k == last {
                break;
            }
            if let Some(norm) = self.norms.get(k) {
                h = norm.forward(tape, h)?;
            }
            h = match self.activation {
                Activation::Gelu => tape.gelu(h),
                Activation::Tanh => tape.tanh(h),
                Activation::Identity => h,
            };
        }
        Ok(h)
    }
}

impl BoundVars for BoundMlp {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        for l in &self.layers {
            l.collect_vars(out);
        }
        for n in &self.norms {
            n.collect_vars(out);
        }
    }
}

impl<T: Real> Params<T> for Mlp<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.params());
        }
        for n in &self.norms {
            out.extend(n.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        for n in &mut self.norms {
            out.extend(n.params_mut());
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

    #[test]
    fn identity_layer_passes_input_through() {
        let mut mlp = Mlp::<f64>::zeros(&[3, 3], Activation::Identity, false);
        mlp.layers[0].weight = Tensor::eye(3);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 4.0, 3.0]]).unwrap();
        assert_eq!(mlp.run(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_return_last_bias() {
        let mut mlp = Mlp::<f64>::zeros(&[2, 5, 3], Activation::Gelu, true);
        mlp.layers[1].bias = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let x = Tensor::from_rows(&[vec![7.0, -1.0]]).unwrap();
        assert_eq!(mlp.run(&x).unwrap().data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mlp = Mlp::<f64>::zeros(&[2, 3], Activation::Gelu, false);
        assert!(mlp.run(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn three_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for norm in [false, true] {
            let mlp = Mlp::<f64>::new(&[4, 6, 5, 3], Activation::Gelu, norm, &mut rng);
            let x = Tensor::uniform(&[3, 4], 2.0, &mut rng);
            let mut inputs: Vec<Tensor<f64>> = mlp.params().into_iter().cloned().collect();
            inputs.push(x);
            let report = gradcheck(&inputs, 1e-5, |tape, vars| {
                let n_lin = 2 * mlp.layers.len();
                let layers = (0..mlp.layers.len())
                    .map(|k| BoundLinear {
                        w: vars[2 * k],
                        b: vars[2 * k + 1],
                    })
                    .collect();
                let norms = (0..mlp.norms.len())
                    .map(|k| BoundLayerNorm {
                        gain: vars[n_lin + 2 * k],
                        bias: vars[n_lin + 2 * k + 1],
                    })
                    .collect();
                let bound = BoundMlp {
                    activation: Activation::Gelu,
                    layers,
                    norms,
                };
                let y = bound.forward(tape, *vars.last().unwrap())?;
                let y = tape.tanh(y);
                Ok(tape.sum(y))
            })
            .unwrap();
            assert!(report.max_rel_error() < 1e-5, "norm={norm}: {report:?}");
        }
    }
}
