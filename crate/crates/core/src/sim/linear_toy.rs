use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Channel, FieldSequence, Provenance, SimConfig, System};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Discrete sine mode `φ_j(i) = sqrt(2/(n+1)) sin(jπ(i+1)/(n+1))`,
/// `j ≥ 1`, `i ∈ [0, n)`. Distinct modes are orthonormal.
pub fn sine_mode(j: usize, n: usize) -> Vec<f64> {
    let scale = (2.0 / (n as f64 + 1.0)).sqrt();
    (0..n)
        .map(|i| scale * (j as f64 * std::f64::consts::PI * (i + 1) as f64 / (n as f64 + 1.0)).sin())
        .collect()
}

/// `Y(t) = Σ_j c_j e^{−γ_j t} φ_j`, evaluated in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearToy {
    pub n: usize,
    pub gammas: Vec<f64>,
    pub coeffs: Vec<f64>,
    modes: Vec<Vec<f64>>,
}

impl LinearToy {
    pub fn new(n: usize, gammas: Vec<f64>, coeffs: Vec<f64>) -> Result<Self> {
        if gammas.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::config("decay rates must be positive"));
        }
        if gammas.len() != coeffs.len() || gammas.is_empty() || gammas.len() > n {
            return Err(Error::config("need 1..=n modes with one coefficient each"));
        }
        let modes = (1..=gammas.len()).map(|j| sine_mode(j, n)).collect();
        Ok(LinearToy { n, gammas, coeffs, modes })
    }

    pub fn num_modes(&self) -> usize {
        self.gammas.len()
    }

    pub fn mode(&self, j: usize) -> &[f64] {
        &self.modes[j]
    }

    pub fn max_gamma(&self) -> f64 {
        self.gammas.iter().cloned().fold(0.0, f64::max)
    }

    /// Modal amplitudes at time `t`.
    pub fn amplitudes(&self, t: f64) -> Vec<f64> {
        self.coeffs.iter().zip(&self.gammas).map(|(c, g)| c * (-g * t).exp()).collect()
    }

    pub fn state(&self, t: f64) -> Vec<f64> {
        self.synthesize(&self.amplitudes(t))
    }

    pub fn synthesize(&self, amplitudes: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (a, phi) in amplitudes.iter().zip(&self.modes) {
            for (yi, p) in y.iter_mut().zip(phi) {
                *yi += a * p;
            }
        }
        y
    }

    /// Orthogonal projection of a state onto the retained modes.
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        self.modes.iter().map(|phi| phi.iter().zip(y).map(|(a, b)| a * b).sum()).collect()
    }

    /// Evolve an arbitrary state in the mode span by `s` (negative `s`
    /// runs backward).
    pub fn propagate(&self, y: &[f64], s: f64) -> Vec<f64> {
        let a: Vec<f64> = self.project(y).iter().zip(&self.gammas).map(|(a, g)| a * (-g * s).exp()).collect();
        self.synthesize(&a)
    }
}

/// Closed-form toy trajectory. Coefficients are standard normal draws
/// scaled by ε from `cfg.seed`.
pub fn simulate_linear_toy(cfg: &SimConfig) -> Result<FieldSequence> {
    cfg.validate()?;
    let n = cfg.grid[0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coeffs: Vec<f64> = cfg
        .gammas
        .iter()
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.epsilon * z
        })
        .collect::<Vec<f64>>();
    let toy = LinearToy::new(n, cfg.gammas.clone(), coeffs.clone())?;
    let dt = cfg.dt_save();
    let mut data = Vec::with_capacity(cfg.frames * n);
    for t in 0..cfg.frames {
        data.extend(toy.state(t as f64 * dt).iter().map(|&v| v as f32));
    }
    let mut params: BTreeMap<String, f64> = BTreeMap::new();
    for (j, (g, c)) in toy.gammas.iter().zip(&coeffs).enumerate() {
        params.insert(format!("gamma_{j}"), *g);
        params.insert(format!("coeff_{j}"), *c);
    }
    FieldSequence::new(
        Tensor::new(vec![cfg.frames, n], data)?,
        vec![n],
        vec![Channel::Amplitude],
        dt,
        None,
        Provenance {
            system: System::Linear,
            seed: cfg.seed,
            params,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_mode_terminal_amplitude() {
        let toy = LinearToy::new(16, vec![1.0], vec![1.0]).unwrap();
        assert!((toy.amplitudes(2.0)[0] - (-2.0f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn modes_are_orthonormal() {
        let n = 20;
        for j in 1..=n {
            for k in 1..=n {
                let dot: f64 = sine_mode(j, n).iter().zip(sine_mode(k, n)).map(|(a, b)| a * b).sum();
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-13, "({j},{k}) {dot}");
            }
        }
    }

    #[test]
    fn non_positive_rate_is_rejected() {
        assert!(LinearToy::new(8, vec![1.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(LinearToy::new(8, vec![-1.0], vec![1.0]).is_err());
    }

    #[test]
    fn simulated_sequence_matches_closed_form() {
        let cfg = SimConfig {
            seed: 4,
            ..SimConfig::linear()
        };
        let seq = simulate_linear_toy(&cfg).unwrap();
        assert_eq!(seq.frames.shape(), &[51, 64]);
        assert_eq!(seq.frames, simulate_linear_toy(&cfg).unwrap().frames);
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    proptest! {
        #[test]
        fn norm_is_non_increasing(
            gammas in proptest::collection::vec(0.01f64..3.0, 1..5),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<f64> = gammas.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
            let toy = LinearToy::new(12, gammas, coeffs).unwrap();
            let mut prev = f64::INFINITY;
            for k in 0..40 {
                let cur = norm(&toy.state(k as f64 * 0.1));
                prop_assert!(cur <= prev * (1.0 + 1e-14));
                prev = cur;
            }
        }

        #[test]
        fn semigroup_property(
            gammas in proptest::collection::vec(0.01f64..2.0, 1..5),
            t in 0.0f64..3.0,
            s in 0.0f64..3.0,
        ) {
            let coeffs: Vec<f64> = (0..gammas.len()).map(|j| 1.0 - 0.3 * j as f64).collect();
            let toy = LinearToy::new(10, gammas, coeffs).unwrap();
            let direct = toy.state(t + s);
            let composed = toy.propagate(&toy.state(t), s);
            for (a, b) in direct.iter().zip(&composed) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
