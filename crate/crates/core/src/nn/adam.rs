use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr·wd·p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Moment buffers are kept in f64 regardless of
/// the parameter precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Any non-finite gradient aborts the step before a
    /// single parameter is touched.
    pub fn step<T: Real>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::config(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if let Some(k) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {k}")));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::config("adam: parameter set changed between steps"));
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.to_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                let mut x = pv.to_f64();
                x -= lr * weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + eps);
                *pv = T::from_f64(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_rows(&[vec![1.0f64, -2.0, 3.5]]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros(&[1, 3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_rows(&[vec![0.5f64, -0.5]]).unwrap();
        let g = Tensor::from_rows(&[vec![3.0, -0.2]]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((p.data()[1] - (-0.5 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut x = Tensor::from_rows(&[vec![1.0f64, 1.0]]).unwrap();
        let mut adam = Adam::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let g = x.map(|v| 2.0 * v);
            adam.step(&mut [&mut x], &[g]).unwrap();
        }
        assert!(x.norm() < 1e-3, "{:?}", x.data());
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut a = Tensor::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        let mut b = Tensor::from_rows(&[vec![3.0f32]]).unwrap();
        let before = (a.clone(), b.clone());
        let mut adam = Adam::new(AdamConfig::default());
        let grads = [Tensor::full(&[1, 2], 1.0), Tensor::full(&[1, 1], f32::NAN)];
        let err = adam.step(&mut [&mut a, &mut b], &grads).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!((a, b), before);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn weight_decay_shrinks_toward_zero() {
        let mut p = Tensor::from_rows(&[vec![2.0f64]]).unwrap();
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 1e-4,
            ..AdamConfig::default()
        });
        adam.step(&mut [&mut p], &[Tensor::zeros(&[1, 1])]).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 1e-7)).abs() < 1e-15);
    }
}
