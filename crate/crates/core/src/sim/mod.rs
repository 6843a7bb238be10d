//! Ensemble generators for the benchmark systems.

mod kolmogorov;
mod ks;
mod lbm;
mod linear_toy;
pub mod spectral;

pub use kolmogorov::{simulate_kolmogorov2d, Kolmogorov};
pub use ks::{ks_convergence_order, simulate_ks2d, Ks2d};
pub use lbm::{simulate_kvs_lbm, tau_for, Lattice, StrouhalEstimate, MIN_TAU};
pub use linear_toy::{simulate_linear_toy, sine_mode, LinearToy};
pub use spectral::{etdrk4_step, Etdrk4, Fft2};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Ks,
    Kolmogorov,
    Kvs,
    Linear,
}

impl System {
    pub const ALL: [System; 4] = [System::Ks, System::Kolmogorov, System::Kvs, System::Linear];

    pub fn name(self) -> &'static str {
        match self {
            System::Ks => "ks",
            System::Kolmogorov => "kolmogorov",
            System::Kvs => "kvs",
            System::Linear => "linear",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ks" | "ks2d" => Ok(System::Ks),
            "kolmogorov" | "kolmogorov2d" | "kf" | "kf2d" => Ok(System::Kolmogorov),
            "kvs" | "cylinder" => Ok(System::Kvs),
            "linear" | "toy" => Ok(System::Linear),
            other => Err(Error::config(format!("unknown system '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Height,
    Vorticity,
    VelocityMagnitude,
    Amplitude,
}

/// Simulation parameters. Fields that a system does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub system: System,
    /// `[ny, nx]` for 2D systems, `[n]` for the linear toy.
    pub grid: Vec<usize>,
    /// Periodic box side for spectral systems.
    pub domain: f64,
    pub dt: f64,
    pub save_every: usize,
    /// Steps discarded before the first saved frame.
    pub burn_in_steps: usize,
    /// Number of saved frames (`T + 1`).
    pub frames: usize,
    pub epsilon: f64,
    pub reynolds: f64,
    pub forcing_k0: f64,
    pub forcing: bool,
    pub nonlinear: bool,
    pub u_inf: f64,
    pub radius: f64,
    /// Transverse inlet modulation amplitude relative to `u_inf`.
    pub inlet_modulation: f64,
    pub inlet_phase: f64,
    /// Linear toy decay rates, one per mode.
    pub gammas: Vec<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::ks()
    }
}

impl SimConfig {
    fn base(system: System) -> Self {
        SimConfig {
            system,
            grid: vec![64, 64],
            domain: 2.0 * std::f64::consts::PI,
            dt: 0.01,
            save_every: 1,
            burn_in_steps: 0,
            frames: 101,
            epsilon: 0.0,
            reynolds: 0.0,
            forcing_k0: 0.0,
            forcing: false,
            nonlinear: true,
            u_inf: 0.0,
            radius: 0.0,
            inlet_modulation: 0.0,
            inlet_phase: 0.0,
            gammas: Vec::new(),
            seed: 0,
        }
    }

    /// 64×64, L = 16π, dt 0.05, every 5 steps, 101 frames, ε 0.15.
    pub fn ks() -> Self {
        SimConfig {
            domain: 16.0 * std::f64::consts::PI,
            dt: 0.05,
            save_every: 5,
            epsilon: 0.15,
            ..Self::base(System::Ks)
        }
    }

    /// 64×64 on [0, 2π)², Re 50, k0 4, dt 0.01, 1000 burn-in steps,
    /// every 10 steps, 101 frames, ε 0.05.
    pub fn kolmogorov() -> Self {
        SimConfig {
            dt: 0.01,
            save_every: 10,
            burn_in_steps: 1000,
            epsilon: 0.05,
            reynolds: 50.0,
            forcing_k0: 4.0,
            forcing: true,
            ..Self::base(System::Kolmogorov)
        }
    }

    /// 400×160 lattice, r 16, ground-truth Re 80.6 and U 0.036,
    /// 14000 steps saved every 100.
    pub fn kvs() -> Self {
        SimConfig {
            grid: vec![160, 400],
            domain: 0.0,
            dt: 1.0,
            save_every: 100,
            burn_in_steps: 2500,
            frames: 141,
            reynolds: 80.6,
            u_inf: 0.036,
            radius: 16.0,
            inlet_modulation: 0.01,
            ..Self::base(System::Kvs)
        }
    }

    /// 64 points, three modes with rates 0.2, 0.5, 1.0, dt 0.1, 51 frames.
    pub fn linear() -> Self {
        SimConfig {
            grid: vec![64],
            domain: 1.0,
            dt: 0.1,
            frames: 51,
            epsilon: 1.0,
            gammas: vec![0.2, 0.5, 1.0],
            ..Self::base(System::Linear)
        }
    }

    pub fn defaults_for(system: System) -> Self {
        match system {
            System::Ks => Self::ks(),
            System::Kolmogorov => Self::kolmogorov(),
            System::Kvs => Self::kvs(),
            System::Linear => Self::linear(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        if self.save_every == 0 {
            return Err(Error::config("save stride must be at least 1"));
        }
        if self.frames == 0 {
            return Err(Error::config("at least one frame is required"));
        }
        match self.system {
            System::Ks | System::Kolmogorov => {
                if self.grid.len() != 2 || self.grid.iter().any(|&g| !g.is_power_of_two() || g < 4) {
                    return Err(Error::config(format!(
                        "spectral grid must be two powers of two, got {:?}",
                        self.grid
                    )));
                }
                if !(self.domain > 0.0) {
                    return Err(Error::config("domain size must be positive"));
                }
            }
            System::Kvs => {
                if self.grid.len() != 2 || !self.grid[0].is_multiple_of(4) || !self.grid[1].is_multiple_of(4) {
                    return Err(Error::config("lattice dims must be [ny, nx], multiples of 4"));
                }
                if !(self.u_inf > 0.0 && self.reynolds > 0.0 && self.radius > 0.0) {
                    return Err(Error::config("u_inf, reynolds and radius must be positive"));
                }
            }
            System::Linear => {
                if self.grid.len() != 1 || self.grid[0] == 0 {
                    return Err(Error::config("linear toy grid must be [n]"));
                }
                if self.gammas.is_empty() || self.gammas.len() > self.grid[0] {
                    return Err(Error::config("need between 1 and n decay rates"));
                }
            }
        }
        Ok(())
    }

    /// Physical time between saved frames.
    pub fn dt_save(&self) -> f64 {
        self.dt * self.save_every as f64
    }
}

/// Where a field sequence came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub system: System,
    pub seed: u64,
    /// Resolved scalar parameters (e.g. per-member Re).
    pub params: BTreeMap<String, f64>,
}

/// A saved trajectory: `frames` is `[(T+1), n]` with channels laid out
/// one after another, each a row-major grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSequence {
    pub frames: Tensor<f32>,
    pub grid_shape: Vec<usize>,
    pub channels: Vec<Channel>,
    pub dt_save: f64,
    /// Per grid cell, `true` where the cell is excluded (solid obstacle).
    pub mask: Option<Vec<bool>>,
    pub provenance: Provenance,
}

impl FieldSequence {
    pub fn new(
        frames: Tensor<f32>,
        grid_shape: Vec<usize>,
        channels: Vec<Channel>,
        dt_save: f64,
        mask: Option<Vec<bool>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let cells: usize = grid_shape.iter().product();
        if frames.shape().len() != 2 || frames.cols() != cells * channels.len() {
            return Err(Error::config(format!(
                "frames {:?} do not match grid {:?} × {} channels",
                frames.shape(),
                grid_shape,
                channels.len()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != cells {
                return Err(Error::config("mask length must equal grid cell count"));
            }
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite("field frames".into()));
        }
        Ok(FieldSequence {
            frames,
            grid_shape,
            channels,
            dt_save,
            mask,
            provenance,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn cells(&self) -> usize {
        self.grid_shape.iter().product()
    }

    /// Flattened state width `n`.
    pub fn width(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.frames.row(t)
    }

    /// Per-state-entry weights: 0 on masked cells (in every channel), 1 elsewhere.
    pub fn weights(&self) -> Vec<f32> {
        let cells = self.cells();
        (0..self.width())
            .map(|i| match &self.mask {
                Some(m) if m[i % cells] => 0.0,
                _ => 1.0,
            })
            .collect()
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        Ok(FieldSequence {
            frames: self.frames.slice_rows(start, end)?,
            ..self.clone()
        })
    }
}

/// Dispatch on `cfg.system`.
pub fn simulate(cfg: &SimConfig) -> Result<FieldSequence> {
    match cfg.system {
        System::Ks => simulate_ks2d(cfg),
        System::Kolmogorov => simulate_kolmogorov2d(cfg),
        System::Kvs => simulate_kvs_lbm(cfg),
        System::Linear => simulate_linear_toy(cfg),
    }
}

/// Seed for ensemble member `k` (member index past the end is the
/// ground-truth run).
pub fn member_seed(base: u64, k: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

/// Configuration of ensemble member `k`. For the cylinder wake Re, U∞,
/// burn-in and inlet phase are drawn per member; a draw with τ ≤ 0.535 is
/// discarded and redrawn.
pub fn member_config(base: &SimConfig, k: usize) -> SimConfig {
    let seed = member_seed(base.seed, k);
    let mut cfg = SimConfig { seed, ..base.clone() };
    if base.system == System::Kvs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let re = rng.random_range(60.0..=130.0);
            let u = rng.random_range(0.03..=0.05);
            if tau_for(u, base.radius, re) > MIN_TAU {
                cfg.reynolds = re;
                cfg.u_inf = u;
                break;
            }
        }
        cfg.burn_in_steps = rng.random_range(1000..=4000);
        cfg.inlet_phase = rng.random_range(0.0..std::f64::consts::TAU);
    }
    cfg
}

/// Ground-truth run: the fixed reference parameters for the cylinder wake,
/// otherwise an unseen seed.
pub fn ground_truth_config(base: &SimConfig, ensemble: usize) -> SimConfig {
    let mut cfg = member_config(base, ensemble);
    if base.system == System::Kvs {
        let defaults = SimConfig::kvs();
        cfg.reynolds = defaults.reynolds;
        cfg.u_inf = defaults.u_inf;
    }
    cfg
}

/// Low-pass Gaussian noise on an `ny × nx` periodic grid keeping integer
/// modes with `|m| ≤ kmax`, rescaled to unit max-abs.
pub(crate) fn lowpass_noise(ny: usize, nx: usize, kmax: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::StandardNormal;
    use rustfft::num_complex::Complex64;

    let mut fft = Fft2::new(ny, nx);
    let white: Vec<f64> = (0..ny * nx).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut spec = fft.forward_real(&white);
    for y in 0..ny {
        let my = spectral::mode_index(y, ny) as f64;
        for x in 0..nx {
            let mx = spectral::mode_index(x, nx) as f64;
            let r = (mx * mx + my * my).sqrt();
            if r > kmax || r == 0.0 {
                spec[y * nx + x] = Complex64::new(0.0, 0.0);
            }
        }
    }
    let field = fft.inverse_real(&spec);
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return field;
    }
    field.into_iter().map(|v| v / peak).collect()
}

pub(crate) fn blow_up_check(frame: usize, values: &[f64], limit: f64) -> Result<()> {
    for &v in values {
        if !v.is_finite() || v.abs() > limit {
            return Err(Error::BlowUp {
                frame,
                reason: format!("value {v} exceeds {limit:e}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for s in System::ALL {
            SimConfig::defaults_for(s).validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = SimConfig::ks();
        c.dt = 0.0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::ks();
        c.grid = vec![48, 64];
        assert!(c.validate().is_err());
        let mut c = SimConfig::kolmogorov();
        c.save_every = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kvs_members_respect_tau_floor() {
        let base = SimConfig::kvs();
        for k in 0..200 {
            let m = member_config(&base, k);
            assert!(tau_for(m.u_inf, m.radius, m.reynolds) > MIN_TAU);
            assert!((60.0..=130.0).contains(&m.reynolds));
            assert!((0.03..=0.05).contains(&m.u_inf));
            assert!((1000..=4000).contains(&m.burn_in_steps));
        }
    }

    #[test]
    fn system_names_round_trip() {
        for s in System::ALL {
            assert_eq!(s.name().parse::<System>().unwrap(), s);
        }
        assert!("heat".parse::<System>().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let c = SimConfig::kvs();
        let text = toml::to_string(&c).unwrap();
        let back: SimConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
