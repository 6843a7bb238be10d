//! Doubly periodic FFT plumbing and the ETDRK4 exponential integrator.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Number of contour points used to evaluate the φ-functions.
pub const CONTOUR_POINTS: usize = 32;

/// Forward/inverse 2D complex FFT on a row-major `ny × nx` grid.
/// The inverse is normalized so `inverse(forward(x)) == x`.
pub struct Fft2 {
    pub ny: usize,
    pub nx: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    column: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(ny: usize, nx: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(nx);
        let row_inv = planner.plan_fft_inverse(nx);
        let col_fwd = planner.plan_fft_forward(ny);
        let col_inv = planner.plan_fft_inverse(ny);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Fft2 {
            ny,
            nx,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
            column: vec![Complex64::new(0.0, 0.0); ny],
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.transform(data, false);
        let s = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }

    fn transform(&mut self, data: &mut [Complex64], forward: bool) {
        assert_eq!(data.len(), self.len());
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        row.process_with_scratch(data, &mut self.scratch);
        for x in 0..self.nx {
            for y in 0..self.ny {
                self.column[y] = data[y * self.nx + x];
            }
            col.process_with_scratch(&mut self.column, &mut self.scratch);
            for y in 0..self.ny {
                data[y * self.nx + x] = self.column[y];
            }
        }
    }

    pub fn forward_real(&mut self, real: &[f64]) -> Vec<Complex64> {
        let mut c: Vec<Complex64> = real.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut c);
        c
    }

    /// Inverse transform keeping only the real part.
    pub fn inverse_real(&mut self, spec: &[Complex64]) -> Vec<f64> {
        let mut c = spec.to_vec();
        self.inverse(&mut c);
        c.into_iter().map(|v| v.re).collect()
    }
}

/// Signed integer mode index for FFT bin `i` of an `n`-point transform.
pub fn mode_index(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Angular wavenumbers `(kx, ky)` per spectral bin for a square-celled
/// periodic box of side `length` (same length in both directions).
/// The Nyquist bin gets wavenumber zero for odd derivatives.
pub struct Wavenumbers {
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
    /// `kx² + ky²` using the signed Nyquist value.
    pub k2: Vec<f64>,
    /// 2/3-rule mask: true where the mode is retained.
    pub dealias: Vec<bool>,
}

impl Wavenumbers {
    pub fn new(ny: usize, nx: usize, length: f64) -> Self {
        let scale = 2.0 * PI / length;
        let n = nx * ny;
        let mut kx = Vec::with_capacity(n);
        let mut ky = Vec::with_capacity(n);
        let mut k2 = Vec::with_capacity(n);
        let mut dealias = Vec::with_capacity(n);
        for y in 0..ny {
            let my = mode_index(y, ny);
            for x in 0..nx {
                let mx = mode_index(x, nx);
                let kxf = mx as f64 * scale;
                let kyf = my as f64 * scale;
                k2.push(kxf * kxf + kyf * kyf);
                let odd = |m: i64, n: usize| {
                    if n.is_multiple_of(2) && m == (n / 2) as i64 {
                        0.0
                    } else {
                        m as f64 * scale
                    }
                };
                kx.push(odd(mx, nx));
                ky.push(odd(my, ny));
                dealias.push(3 * mx.unsigned_abs() as usize <= nx && 3 * my.unsigned_abs() as usize <= ny);
            }
        }
        Wavenumbers { kx, ky, k2, dealias }
    }
}

/// Per-mode ETDRK4 coefficients for a real diagonal linear symbol.
#[derive(Clone, Debug)]
pub struct Etdrk4 {
    pub dt: f64,
    pub e: Vec<f64>,
    pub e2: Vec<f64>,
    pub q: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
}

impl Etdrk4 {
    /// Coefficients via contour averaging over a circle of radius one
    /// around each `dt·L`.
    pub fn new(symbol: &[f64], dt: f64) -> Self {
        let roots: Vec<Complex64> = (1..=CONTOUR_POINTS)
            .map(|j| Complex64::from_polar(1.0, PI * (j as f64 - 0.5) / (CONTOUR_POINTS as f64 / 2.0)))
            .collect();
        let m = CONTOUR_POINTS as f64;
        let n = symbol.len();
        let mut out = Etdrk4 {
            dt,
            e: Vec::with_capacity(n),
            e2: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            f1: Vec::with_capacity(n),
            f2: Vec::with_capacity(n),
            f3: Vec::with_capacity(n),
        };
        for &l in symbol {
            let hl = dt * l;
            out.e.push(hl.exp());
            out.e2.push((hl / 2.0).exp());
            let zero = Complex64::new(0.0, 0.0);
            let (mut q, mut f1, mut f2, mut f3) = (zero, zero, zero, zero);
            for r in &roots {
                let z = Complex64::new(hl, 0.0) + r;
                let ez = z.exp();
                let z3 = z * z * z;
                q += ((z / 2.0).exp() - 1.0) / z;
                f1 += ((-4.0 - z) + ez * (4.0 - 3.0 * z + z * z)) / z3;
                f2 += ((2.0 + z) + ez * (z - 2.0)) / z3;
                f3 += ((-4.0 - 3.0 * z - z * z) + ez * (4.0 - z)) / z3;
            }
            out.q.push(dt * (q / m).re);
            out.f1.push(dt * (f1 / m).re);
            out.f2.push(dt * (f2 / m).re);
            out.f3.push(dt * (f3 / m).re);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    /// Advance `v` (spectral state) by one step. `nonlinear` maps a spectral
    /// state to its spectral nonlinear term.
    pub fn step<F>(&self, v: &[Complex64], mut nonlinear: F) -> Result<Vec<Complex64>>
    where
        F: FnMut(&[Complex64]) -> Vec<Complex64>,
    {
        let n = self.len();
        if v.len() != n {
            return Err(Error::ShapeMismatch {
                op: "etdrk4",
                left: vec![v.len()],
                right: vec![n],
            });
        }
        let nv = nonlinear(v);
        let a: Vec<Complex64> = (0..n).map(|i| v[i] * self.e2[i] + nv[i] * self.q[i]).collect();
        let na = nonlinear(&a);
        let b: Vec<Complex64> = (0..n).map(|i| v[i] * self.e2[i] + na[i] * self.q[i]).collect();
        let nb = nonlinear(&b);
        let c: Vec<Complex64> = (0..n).map(|i| a[i] * self.e2[i] + (nb[i] * 2.0 - nv[i]) * self.q[i]).collect();
        let nc = nonlinear(&c);
        let out: Vec<Complex64> = (0..n)
            .map(|i| v[i] * self.e[i] + nv[i] * self.f1[i] + (na[i] + nb[i]) * (2.0 * self.f2[i]) + nc[i] * self.f3[i])
            .collect();
        if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("etdrk4 state".into()));
        }
        Ok(out)
    }
}

/// One step of [`Etdrk4`] with freshly computed coefficients.
pub fn etdrk4_step<F>(state_hat: &[Complex64], linear_symbol: &[f64], nonlinear_eval: F, dt: f64) -> Result<Vec<Complex64>>
where
    F: FnMut(&[Complex64]) -> Vec<Complex64>,
{
    Etdrk4::new(linear_symbol, dt).step(state_hat, nonlinear_eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fft_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fft = Fft2::new(8, 16);
        let x: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = fft.forward_real(&x);
        let back = fft.inverse_real(&spec);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_mode_lands_in_one_bin() {
        let (ny, nx) = (8, 8);
        let mut fft = Fft2::new(ny, nx);
        let x: Vec<f64> = (0..ny * nx).map(|i| (2.0 * PI * (i % nx) as f64 * 3.0 / nx as f64).cos()).collect();
        let spec = fft.forward_real(&x);
        for (i, z) in spec.iter().enumerate() {
            let expect = if i == 3 || i == 5 { 32.0 } else { 0.0 };
            assert!((z.norm() - expect).abs() < 1e-12, "bin {i}");
        }
    }

    #[test]
    fn decay_symbol_gives_exact_exponential() {
        let v = vec![Complex64::new(1.0, 0.0)];
        let out = etdrk4_step(&v, &[-1.0], |s| vec![Complex64::new(0.0, 0.0); s.len()], 0.1).unwrap();
        assert!((out[0].re - (-0.1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_symbol_coefficients_match_limits() {
        let c = Etdrk4::new(&[0.0], 1.0);
        assert!((c.q[0] - 0.5).abs() < 1e-13);
        assert!((c.f1[0] - 1.0 / 6.0).abs() < 1e-13);
        assert!((c.f2[0] - 1.0 / 6.0).abs() < 1e-13);
        assert!((c.f3[0] - 1.0 / 6.0).abs() < 1e-13);
    }

    #[test]
    fn constant_forcing_is_integrated_exactly() {
        // v' = l v + 1 has v(t) = (e^{lt} - 1)/l from zero.
        let l = -3.0;
        let c = Etdrk4::new(&[l], 0.2);
        let mut v = vec![Complex64::new(0.0, 0.0)];
        for _ in 0..10 {
            v = c.step(&v, |s| vec![Complex64::new(1.0, 0.0); s.len()]).unwrap();
        }
        let exact = ((l * 2.0f64).exp() - 1.0) / l;
        assert!((v[0].re - exact).abs() < 1e-12);
    }

    #[test]
    fn dealias_mask_keeps_low_third() {
        let w = Wavenumbers::new(12, 12, 2.0 * PI);
        let kept = w.dealias.iter().filter(|&&d| d).count();
        assert_eq!(kept, 9 * 9);
    }
}
