use std::collections::BTreeMap;

use super::{Channel, FieldSequence, Provenance, SimConfig, System};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest relaxation time accepted for a run.
pub const MIN_TAU: f64 = 0.535;
/// Block size of the output downsampling.
pub const BLOCK: usize = 4;

const Q: usize = 9;
// D2Q9: rest, E, N, W, S, NE, NW, SW, SE.
const CX: [isize; Q] = [0, 1, 0, -1, 0, 1, -1, -1, 1];
const CY: [isize; Q] = [0, 0, 1, 0, -1, 1, 1, -1, -1];
const OPP: [usize; Q] = [0, 3, 4, 1, 2, 7, 8, 5, 6];
const W: [f64; Q] = [
    4.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 9.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
    1.0 / 36.0,
];

/// BGK relaxation time for `ν = U·2r/Re` in lattice units.
pub fn tau_for(u_inf: f64, radius: f64, reynolds: f64) -> f64 {
    3.0 * u_inf * 2.0 * radius / reynolds + 0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Boundary {
    /// Equilibrium velocity inlet at x = 0, zero-gradient outlet at x = nx−1,
    /// half-way bounce-back walls below y = 0 and above y = ny−1.
    Channel,
    /// Periodic in both directions.
    Periodic,
}

#[inline]
fn equilibrium(rho: f64, ux: f64, uy: f64) -> [f64; Q] {
    let usq = 1.5 * (ux * ux + uy * uy);
    let mut out = [0.0; Q];
    for q in 0..Q {
        let cu = 3.0 * (CX[q] as f64 * ux + CY[q] as f64 * uy);
        out[q] = W[q] * rho * (1.0 + cu + 0.5 * cu * cu - usq);
    }
    out
}

/// D2Q9 BGK lattice with f64 populations stored post-collision,
/// structure-of-arrays (`f[q·n + y·nx + x]`).
pub struct Lattice {
    pub nx: usize,
    pub ny: usize,
    pub tau: f64,
    boundary: Boundary,
    u_in: f64,
    /// Transverse inlet velocity per row.
    v_in: Vec<f64>,
    solid: Vec<bool>,
    /// Cells whose pull stencil touches no boundary or solid.
    fast: Vec<bool>,
    /// Maximal `[start, end)` flat-index runs of fast cells within a row.
    runs: Vec<(usize, usize)>,
    f: Vec<f64>,
    next: Vec<f64>,
    steps: u64,
}

impl Lattice {
    /// Channel flow past an optional cylinder centred at `(nx/5, ny/2)`.
    /// `modulation` is the transverse inlet amplitude relative to `u_inf`,
    /// with profile `sin(2π y/ny + phase)`; the initial field carries the
    /// same transverse component.
    pub fn channel(nx: usize, ny: usize, tau: f64, u_inf: f64, radius: Option<f64>, modulation: f64, phase: f64) -> Self {
        let n = nx * ny;
        let mut solid = vec![false; n];
        if let Some(r) = radius {
            let (cx, cy) = (cylinder_centre(nx, ny).0 as f64, cylinder_centre(nx, ny).1 as f64);
            for y in 0..ny {
                for x in 0..nx {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    solid[y * nx + x] = dx * dx + dy * dy <= r * r;
                }
            }
        }
        let v_in: Vec<f64> = (0..ny)
            .map(|y| modulation * u_inf * (std::f64::consts::TAU * y as f64 / ny as f64 + phase).sin())
            .collect();
        let mut lat = Lattice::empty(nx, ny, tau, Boundary::Channel, solid.clone());
        lat.u_in = u_inf;
        lat.v_in = v_in.clone();
        lat.fill(|x, y| if solid[y * nx + x] { (0.0, 0.0) } else { (u_inf, v_in[y]) });
        lat
    }

    /// Doubly periodic lattice with an arbitrary initial velocity field.
    pub fn periodic(nx: usize, ny: usize, tau: f64, velocity: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut lat = Lattice::empty(nx, ny, tau, Boundary::Periodic, vec![false; nx * ny]);
        lat.fill(velocity);
        lat
    }

    fn empty(nx: usize, ny: usize, tau: f64, boundary: Boundary, solid: Vec<bool>) -> Self {
        assert!(nx >= 3 && ny >= 3);
        let n = nx * ny;
        let mut fast = vec![false; n];
        for y in 1..ny - 1 {
            for x in 1..nx - 1 {
                fast[y * nx + x] = !solid[y * nx + x]
                    && (0..Q).all(|q| {
                        let sx = (x as isize - CX[q]) as usize;
                        let sy = (y as isize - CY[q]) as usize;
                        !solid[sy * nx + sx]
                    });
            }
        }
        let mut runs = Vec::new();
        for y in 0..ny {
            let mut x = 0;
            while x < nx {
                if fast[y * nx + x] {
                    let start = x;
                    while x < nx && fast[y * nx + x] {
                        x += 1;
                    }
                    runs.push((y * nx + start, y * nx + x));
                } else {
                    x += 1;
                }
            }
        }
        Lattice {
            nx,
            ny,
            tau,
            boundary,
            runs,
            u_in: 0.0,
            v_in: vec![0.0; ny],
            solid,
            fast,
            f: vec![0.0; Q * n],
            next: vec![0.0; Q * n],
            steps: 0,
        }
    }

    fn fill(&mut self, velocity: impl Fn(usize, usize) -> (f64, f64)) {
        let n = self.nx * self.ny;
        for y in 0..self.ny {
            for x in 0..self.nx {
                let idx = y * self.nx + x;
                let (ux, uy) = velocity(x, y);
                let feq = equilibrium(1.0, ux, uy);
                for q in 0..Q {
                    self.f[q * n + idx] = if self.solid[idx] { 0.0 } else { feq[q] };
                }
            }
        }
    }

    pub fn solid(&self) -> &[bool] {
        &self.solid
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Pre-collision populations arriving at `(x, y)`. Entries whose source
    /// lies beyond the inlet or outlet are left at zero.
    #[inline]
    fn pull(&self, x: usize, y: usize) -> [f64; Q] {
        let (nx, ny) = (self.nx, self.ny);
        let n = nx * ny;
        let idx = y * nx + x;
        let mut out = [0.0; Q];
        if self.fast[idx] {
            for q in 0..Q {
                let src = (idx as isize - CY[q] * nx as isize - CX[q]) as usize;
                out[q] = self.f[q * n + src];
            }
            return out;
        }
        for q in 0..Q {
            let mut sx = x as isize - CX[q];
            let mut sy = y as isize - CY[q];
            match self.boundary {
                Boundary::Periodic => {
                    sx = sx.rem_euclid(nx as isize);
                    sy = sy.rem_euclid(ny as isize);
                }
                Boundary::Channel => {
                    if sy < 0 || sy >= ny as isize {
                        out[q] = self.f[OPP[q] * n + idx];
                        continue;
                    }
                    if sx < 0 || sx >= nx as isize {
                        continue;
                    }
                }
            }
            let src = sy as usize * nx + sx as usize;
            out[q] = if self.solid[src] {
                self.f[OPP[q] * n + idx]
            } else {
                self.f[q * n + src]
            };
        }
        out
    }

    /// One stream-and-collide update.
    pub fn step(&mut self) {
        let (nx, ny) = (self.nx, self.ny);
        let n = nx * ny;
        let omega = 1.0 / self.tau;
        let channel = self.boundary == Boundary::Channel;
        let mut next = std::mem::take(&mut self.next);
        {
            let src: Vec<&[f64]> = self.f.chunks_exact(n).collect();
            let mut dst: Vec<&mut [f64]> = next.chunks_exact_mut(n).collect();
            for &(start, end) in &self.runs {
                collide_run(&src, &mut dst, start, end, nx, omega);
            }
            for y in 0..ny {
                for x in 0..nx {
                    let idx = y * nx + x;
                    if self.fast[idx] {
                        continue;
                    }
                    if self.solid[idx] {
                        for d in dst.iter_mut() {
                            d[idx] = 0.0;
                        }
                        continue;
                    }
                    let mut fl = self.pull(x, y);
                    if channel && x == 0 {
                        velocity_inlet(&mut fl, self.u_in, self.v_in[y]);
                    } else if channel && x == nx - 1 {
                        let nb = self.pull(nx - 2, y);
                        for q in [3, 6, 7] {
                            fl[q] = nb[q];
                        }
                    }
                    let (rho, ux, uy) = moments(&fl);
                    let feq = equilibrium(rho, ux, uy);
                    for q in 0..Q {
                        dst[q][idx] = fl[q] + omega * (feq[q] - fl[q]);
                    }
                }
            }
        }
        self.next = std::mem::replace(&mut self.f, next);
        self.steps += 1;
    }

    /// Density and velocity per cell (zero on solid cells), from the stored
    /// post-collision populations.
    pub fn macroscopic(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.nx * self.ny;
        let mut rho = vec![0.0; n];
        let mut ux = vec![0.0; n];
        let mut uy = vec![0.0; n];
        let mut fl = [0.0; Q];
        for idx in 0..n {
            if self.solid[idx] {
                continue;
            }
            for q in 0..Q {
                fl[q] = self.f[q * n + idx];
            }
            let (r, u, v) = moments(&fl);
            rho[idx] = r;
            ux[idx] = u;
            uy[idx] = v;
        }
        (rho, ux, uy)
    }

    pub fn total_mass(&self) -> f64 {
        self.f.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.f.iter().all(|v| v.is_finite())
    }

    pub fn velocity_at(&self, x: usize, y: usize) -> (f64, f64) {
        let n = self.nx * self.ny;
        let idx = y * self.nx + x;
        let mut fl = [0.0; Q];
        for q in 0..Q {
            fl[q] = self.f[q * n + idx];
        }
        let (_, u, v) = moments(&fl);
        (u, v)
    }

    /// `∂v/∂x − ∂u/∂y` by central differences (one-sided on the domain
    /// edge, wrapped when periodic); zero on solid cells.
    pub fn vorticity(&self) -> Vec<f64> {
        let (nx, ny) = (self.nx, self.ny);
        let (_, ux, uy) = self.macroscopic();
        let periodic = self.boundary == Boundary::Periodic;
        let diff = |field: &[f64], x: usize, y: usize, along_x: bool| -> f64 {
            let len = if along_x { nx } else { ny };
            let pos = if along_x { x } else { y };
            let at = |p: usize| if along_x { field[y * nx + p] } else { field[p * nx + x] };
            if periodic {
                (at((pos + 1) % len) - at((pos + len - 1) % len)) / 2.0
            } else if pos == 0 {
                at(1) - at(0)
            } else if pos == len - 1 {
                at(len - 1) - at(len - 2)
            } else {
                (at(pos + 1) - at(pos - 1)) / 2.0
            }
        };
        let mut w = vec![0.0; nx * ny];
        for y in 0..ny {
            for x in 0..nx {
                if !self.solid[y * nx + x] {
                    w[y * nx + x] = diff(&uy, x, y, true) - diff(&ux, x, y, false);
                }
            }
        }
        w
    }
}

fn cylinder_centre(nx: usize, ny: usize) -> (usize, usize) {
    (nx / 5, ny / 2)
}

/// Stream and collide a contiguous run of cells with no boundary in reach.
fn collide_run(src: &[&[f64]], dst: &mut [&mut [f64]], start: usize, end: usize, nx: usize, omega: f64) {
    let len = end - start;
    let s: [&[f64]; Q] = std::array::from_fn(|q| {
        let off = CY[q] * nx as isize + CX[q];
        let a = (start as isize - off) as usize;
        &src[q][a..a + len]
    });
    let [d0, d1, d2, d3, d4, d5, d6, d7, d8] = dst else {
        unreachable!("nine populations")
    };
    let d: [&mut [f64]; Q] = [
        &mut d0[start..end],
        &mut d1[start..end],
        &mut d2[start..end],
        &mut d3[start..end],
        &mut d4[start..end],
        &mut d5[start..end],
        &mut d6[start..end],
        &mut d7[start..end],
        &mut d8[start..end],
    ];
    let [d0, d1, d2, d3, d4, d5, d6, d7, d8] = d;
    for i in 0..len {
        let f = [s[0][i], s[1][i], s[2][i], s[3][i], s[4][i], s[5][i], s[6][i], s[7][i], s[8][i]];
        let rho = f[0] + f[1] + f[2] + f[3] + f[4] + f[5] + f[6] + f[7] + f[8];
        let inv = 1.0 / rho;
        let ux = (f[1] + f[5] + f[8] - f[3] - f[6] - f[7]) * inv;
        let uy = (f[2] + f[5] + f[6] - f[4] - f[7] - f[8]) * inv;
        let usq = 1.5 * (ux * ux + uy * uy);
        let w0 = 4.0 / 9.0 * rho;
        let w1 = rho / 9.0;
        let w2 = rho / 36.0;
        let eq = |w: f64, cu: f64| w * (1.0 + 3.0 * cu + 4.5 * cu * cu - usq);
        d0[i] = f[0] + omega * (w0 * (1.0 - usq) - f[0]);
        d1[i] = f[1] + omega * (eq(w1, ux) - f[1]);
        d2[i] = f[2] + omega * (eq(w1, uy) - f[2]);
        d3[i] = f[3] + omega * (eq(w1, -ux) - f[3]);
        d4[i] = f[4] + omega * (eq(w1, -uy) - f[4]);
        d5[i] = f[5] + omega * (eq(w2, ux + uy) - f[5]);
        d6[i] = f[6] + omega * (eq(w2, uy - ux) - f[6]);
        d7[i] = f[7] + omega * (eq(w2, -ux - uy) - f[7]);
        d8[i] = f[8] + omega * (eq(w2, ux - uy) - f[8]);
    }
}

#[inline]
fn moments(fl: &[f64; Q]) -> (f64, f64, f64) {
    let rho: f64 = fl.iter().sum();
    let mut mx = 0.0;
    let mut my = 0.0;
    for q in 1..Q {
        mx += CX[q] as f64 * fl[q];
        my += CY[q] as f64 * fl[q];
    }
    (rho, mx / rho, my / rho)
}

/// Velocity inlet on a west boundary. Density follows from the known
/// populations (Zou–He); all populations are reset to equilibrium, which
/// stays stable for τ just above the floor where the Zou–He
/// non-equilibrium bounce-back does not.
#[inline]
fn velocity_inlet(fl: &mut [f64; Q], ux: f64, uy: f64) {
    let rho = (fl[0] + fl[2] + fl[4] + 2.0 * (fl[3] + fl[6] + fl[7])) / (1.0 - ux);
    *fl = equilibrium(rho, ux, uy);
}

/// Average `BLOCK × BLOCK` tiles. A coarse cell touching any solid fine cell
/// is masked and set to zero.
fn downsample(field: &[f64], solid: &[bool], nx: usize, ny: usize) -> (Vec<f64>, Vec<bool>) {
    let (cx, cy) = (nx / BLOCK, ny / BLOCK);
    let mut out = vec![0.0; cx * cy];
    let mut mask = vec![false; cx * cy];
    for by in 0..cy {
        for bx in 0..cx {
            let mut sum = 0.0;
            let mut hit = false;
            for y in by * BLOCK..(by + 1) * BLOCK {
                for x in bx * BLOCK..(bx + 1) * BLOCK {
                    sum += field[y * nx + x];
                    hit |= solid[y * nx + x];
                }
            }
            mask[by * cx + bx] = hit;
            out[by * cx + bx] = if hit { 0.0 } else { sum / (BLOCK * BLOCK) as f64 };
        }
    }
    (out, mask)
}

fn build_lattice(cfg: &SimConfig) -> Result<Lattice> {
    cfg.validate()?;
    let tau = tau_for(cfg.u_inf, cfg.radius, cfg.reynolds);
    if tau <= MIN_TAU {
        return Err(Error::config(format!(
            "relaxation time {tau:.4} must exceed {MIN_TAU} (Re {}, U {})",
            cfg.reynolds, cfg.u_inf
        )));
    }
    let (ny, nx) = (cfg.grid[0], cfg.grid[1]);
    Ok(Lattice::channel(
        nx,
        ny,
        tau,
        cfg.u_inf,
        Some(cfg.radius),
        cfg.inlet_modulation,
        cfg.inlet_phase,
    ))
}

fn check_lattice(lat: &Lattice, frame: usize) -> Result<()> {
    if !lat.is_finite() {
        return Err(Error::BlowUp {
            frame,
            reason: "non-finite populations".into(),
        });
    }
    Ok(())
}

/// Cylinder wake vorticity, block-averaged to `(ny/4) × (nx/4)`.
pub fn simulate_kvs_lbm(cfg: &SimConfig) -> Result<FieldSequence> {
    let mut lat = build_lattice(cfg)?;
    let (ny, nx) = (lat.ny, lat.nx);
    for _ in 0..cfg.burn_in_steps {
        lat.step();
    }
    check_lattice(&lat, 0)?;
    let (cy, cx) = (ny / BLOCK, nx / BLOCK);
    let mut data = Vec::with_capacity(cfg.frames * cx * cy);
    let mut coarse_mask = Vec::new();
    for frame in 0..cfg.frames {
        if frame > 0 {
            for _ in 0..cfg.save_every {
                lat.step();
            }
            check_lattice(&lat, frame)?;
        }
        let (w, mask) = downsample(&lat.vorticity(), lat.solid(), nx, ny);
        data.extend(w.iter().map(|&v| v as f32));
        coarse_mask = mask;
    }
    let frames = Tensor::new(vec![cfg.frames, cx * cy], data)?;
    FieldSequence::new(
        frames,
        vec![cy, cx],
        vec![Channel::Vorticity],
        cfg.dt_save(),
        Some(coarse_mask),
        Provenance {
            system: System::Kvs,
            seed: cfg.seed,
            params: BTreeMap::from([
                ("reynolds".into(), cfg.reynolds),
                ("u_inf".into(), cfg.u_inf),
                ("tau".into(), lat.tau),
                ("burn_in_steps".into(), cfg.burn_in_steps as f64),
                ("inlet_phase".into(), cfg.inlet_phase),
            ]),
        },
    )
}

/// Shedding frequency measured from the transverse velocity at a wake probe.
#[derive(Clone, Debug, PartialEq)]
pub struct StrouhalEstimate {
    pub strouhal: f64,
    /// Cycles per lattice step.
    pub frequency: f64,
    /// Number of full periods used.
    pub periods: usize,
    /// Peak-to-peak probe amplitude over the measurement window.
    pub amplitude: f64,
}

impl StrouhalEstimate {
    /// Run `warmup` steps, then sample the probe every step for `measure`
    /// steps and average the spacing of upward mean crossings. The probe sits
    /// four radii downstream of the cylinder centre, on the centreline.
    pub fn measure(cfg: &SimConfig, warmup: usize, measure: usize) -> Result<Self> {
        let mut lat = build_lattice(cfg)?;
        let (cx, cy) = cylinder_centre(lat.nx, lat.ny);
        let px = (cx as f64 + 4.0 * cfg.radius).round() as usize;
        for _ in 0..warmup {
            lat.step();
        }
        check_lattice(&lat, 0)?;
        let mut probe = Vec::with_capacity(measure);
        for _ in 0..measure {
            lat.step();
            probe.push(lat.velocity_at(px, cy).1);
        }
        check_lattice(&lat, 0)?;
        let (frequency, periods) =
            crossing_frequency(&probe).ok_or_else(|| Error::NonFinite("no periodic shedding detected at the probe".into()))?;
        let amplitude = probe.iter().cloned().fold(f64::MIN, f64::max) - probe.iter().cloned().fold(f64::MAX, f64::min);
        Ok(StrouhalEstimate {
            strouhal: frequency * 2.0 * cfg.radius / cfg.u_inf,
            frequency,
            periods,
            amplitude,
        })
    }
}

/// Mean frequency from upward crossings of the signal mean (linear
/// interpolation between samples). Needs at least two crossings.
pub(crate) fn crossing_frequency(signal: &[f64]) -> Option<(f64, usize)> {
    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let mut crossings = Vec::new();
    for i in 1..signal.len() {
        let (a, b) = (signal[i - 1] - mean, signal[i] - mean);
        if a < 0.0 && b >= 0.0 {
            crossings.push(i as f64 - 1.0 + a / (a - b));
        }
    }
    if crossings.len() < 2 {
        return None;
    }
    let periods = crossings.len() - 1;
    let span = crossings[periods] - crossings[0];
    Some((periods as f64 / span, periods))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_lattice_conserves_mass() {
        let mut lat = Lattice::periodic(48, 32, 0.6, |x, y| {
            let (x, y) = (x as f64 / 48.0, y as f64 / 32.0);
            (0.05 * (std::f64::consts::TAU * y).sin(), 0.03 * (std::f64::consts::TAU * x).cos())
        });
        let m0 = lat.total_mass();
        for _ in 0..1000 {
            lat.step();
        }
        assert!(((lat.total_mass() - m0) / m0).abs() < 1e-8);
    }

    #[test]
    fn uniform_inflow_without_obstacle_is_irrotational() {
        let (nx, ny) = (120, 100);
        let mut lat = Lattice::channel(nx, ny, 0.6, 0.04, None, 0.0, 0.0);
        for _ in 0..30 {
            lat.step();
        }
        let w = lat.vorticity();
        for y in 35..ny - 35 {
            for x in 35..nx - 35 {
                assert!(w[y * nx + x].abs() < 1e-8, "({x},{y}) {}", w[y * nx + x]);
            }
        }
        let (u, v) = lat.velocity_at(nx / 2, ny / 2);
        assert!((u - 0.04).abs() < 1e-12 && v.abs() < 1e-12);
    }

    #[test]
    fn equilibrium_moments_are_exact() {
        let f = equilibrium(1.1, 0.03, -0.02);
        let (r, u, v) = moments(&f);
        assert!((r - 1.1).abs() < 1e-15 && (u - 0.03).abs() < 1e-15 && (v + 0.02).abs() < 1e-15);
    }

    #[test]
    fn inlet_imposes_velocity_and_keeps_incoming_density() {
        let mut fl = equilibrium(1.02, 0.0, 0.0);
        velocity_inlet(&mut fl, 0.05, 0.001);
        let (rho, u, v) = moments(&fl);
        assert!((u - 0.05).abs() < 1e-14 && (v - 0.001).abs() < 1e-14);
        assert!((rho - 1.02 / 0.95).abs() < 1e-14);
    }

    #[test]
    fn tau_floor_is_enforced() {
        let cfg = SimConfig {
            reynolds: 130.0,
            u_inf: 0.03,
            ..SimConfig::kvs()
        };
        assert!(tau_for(0.03, 16.0, 130.0) <= MIN_TAU);
        assert!(simulate_kvs_lbm(&cfg).is_err());
    }

    #[test]
    fn small_wake_has_output_shape_and_mask() {
        let cfg = SimConfig {
            grid: vec![40, 100],
            radius: 4.0,
            reynolds: 10.0,
            burn_in_steps: 10,
            save_every: 5,
            frames: 3,
            ..SimConfig::kvs()
        };
        let seq = simulate_kvs_lbm(&cfg).unwrap();
        assert_eq!(seq.grid_shape, vec![10, 25]);
        assert_eq!(seq.frames.shape(), &[3, 250]);
        let mask = seq.mask.as_ref().unwrap();
        assert!(mask.iter().any(|&m| m));
        assert!(!mask[0]);
    }

    #[test]
    fn crossing_frequency_of_sine() {
        let s: Vec<f64> = (0..5000).map(|i| (i as f64 * std::f64::consts::TAU / 250.0 + 0.3).sin()).collect();
        let (f, p) = crossing_frequency(&s).unwrap();
        assert!((f - 1.0 / 250.0).abs() < 1e-7, "{f}");
        assert_eq!(p, 19);
    }
}
