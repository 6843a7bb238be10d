//! Recurrent and feedforward building blocks plus the Adam optimizer.
//!
//! Parameters live in plain [`Tensor`]s owned by each module. To run a
//! differentiable forward pass a module is *bound* to a [`Tape`], which
//! copies its parameters onto the tape as leaves and returns a handle struct
//! of [`Var`]s. `params()` on the module and `collect_vars()` on the bound
//! handle always enumerate parameters in the same order, so gradients can be
//! matched back to storage positionally.

mod adam;
mod lstm;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use lstm::{BoundLstmStack, LstmDirection, LstmLayer, LstmStack};
pub use mlp::{Activation, BoundMlp, Mlp};

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Ordered access to a module's parameter tensors.
pub trait Params<T: Real> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// A module's parameters placed on a tape.
pub trait BoundVars {
    fn collect_vars(&self, out: &mut Vec<Var>);

    fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        self.collect_vars(&mut v);
        v
    }
}

/// Gradients for every bound parameter, in binding order.
pub fn gradients_of<T: Real>(tape: &Tape<T>, grads: &Gradients<T>, bound: &impl BoundVars) -> Vec<Tensor<T>> {
    bound.vars().into_iter().map(|v| grads.wrt(tape, v)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    /// `[1, out]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl<T: Real> Linear<T> {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and biases.
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[input, output], bound, rng),
            bias: Tensor::uniform(&[1, output], bound, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundLinear {
        BoundLinear {
            w: tape.leaf(self.weight.clone(), trainable),
            b: tape.leaf(self.bias.clone(), trainable),
        }
    }

    /// Bind to existing vars taken in `params()` order.
    pub fn bind_vars(&self, vars: &mut impl Iterator<Item = Var>) -> BoundLinear {
        BoundLinear {
            w: vars.next().expect("linear weight var"),
            b: vars.next().expect("linear bias var"),
        }
    }

    pub fn forward_value(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = bound.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl BoundLinear {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.w, self.b)
    }
}

impl BoundVars for BoundLinear {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        out.push(self.w);
        out.push(self.b);
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Learnable gain and bias of a layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(&[width], T::ONE),
            bias: Tensor::zeros(&[width]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundLayerNorm {
        BoundLayerNorm {
            gain: tape.leaf(self.gain.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    pub fn bind_vars(&self, vars: &mut impl Iterator<Item = Var>) -> BoundLayerNorm {
        BoundLayerNorm {
            gain: vars.next().expect("norm gain var"),
            bias: vars.next().expect("norm bias var"),
        }
    }
}

impl BoundLayerNorm {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

impl BoundVars for BoundLayerNorm {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        out.push(self.gain);
        out.push(self.bias);
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Place every parameter on the tape as a leaf, in `params()` order.
pub fn leaves<T: Real>(tape: &mut Tape<T>, params: &[&Tensor<T>], trainable: bool) -> Vec<Var> {
    params.iter().map(|p| tape.leaf((*p).clone(), trainable)).collect()
}

/// Split a `[rows, d]` matrix into `rows` single-row constants.
pub fn split_rows<T: Real>(tape: &mut Tape<T>, m: &Tensor<T>) -> Vec<Var> {
    (0..m.rows())
        .map(|r| tape.constant(m.slice_rows(r, r + 1).expect("row in range")))
        .collect()
}
