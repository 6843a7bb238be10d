//! Error metrics, windowed SSIM, per-region reports, and the closed-form
//! check of backward error growth on the linear toy.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_json;
use crate::sim::{Channel, FieldSequence, LinearToy};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `mask[i % mask.len()]` marks state entry `i` as excluded; the mask may be
/// per cell (repeated over channels) or per entry.
fn excluded(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_some_and(|m| m[i % m.len()])
}

fn check_pair(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    Ok(())
}

/// Root mean squared error over unmasked entries of every frame.
pub fn rmse(pred: &Tensor<f32>, truth: &Tensor<f32>, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(pred, truth)?;
    let n = truth.cols();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (k, (a, b)) in pred.data().iter().zip(truth.data()).enumerate() {
        if excluded(mask, k % n) {
            continue;
        }
        let d = *a as f64 - *b as f64;
        sum += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::config("rmse over an empty selection"));
    }
    Ok((sum / count as f64).sqrt())
}

/// `max − min` of the unmasked truth.
pub fn data_range(truth: &Tensor<f32>, mask: Option<&[bool]>) -> f64 {
    let n = truth.cols();
    let (lo, hi) = truth
        .data()
        .iter()
        .enumerate()
        .filter(|(k, _)| !excluded(mask, k % n))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, &v)| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// `rmse / Δ`; a zero data range is an error.
pub fn nrmse(pred: &Tensor<f32>, truth: &Tensor<f32>, mask: Option<&[bool]>) -> Result<f64> {
    let delta = data_range(truth, mask);
    nrmse_with_range(pred, truth, mask, delta)
}

pub fn nrmse_with_range(pred: &Tensor<f32>, truth: &Tensor<f32>, mask: Option<&[bool]>, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::NonFinite("nrmse: ground truth has zero data range".into()));
    }
    Ok(rmse(pred, truth, mask)? / delta)
}

fn gaussian_window(len: usize) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every window lying fully inside the grid and free of
/// masked cells. Gaussian window (11 taps per axis, σ = 1.5, shrunk to the
/// grid when smaller), `C1 = (0.01·L)²`, `C2 = (0.03·L)²`, weighted
/// population moments. `None` when every window is masked.
pub fn ssim_frame(pred: &[f32], truth: &[f32], grid_shape: &[usize], dynamic_range: f64, mask: Option<&[bool]>) -> Result<Option<f64>> {
    let (ny, nx) = match grid_shape {
        [n] => (1, *n),
        [ny, nx] => (*ny, *nx),
        _ => return Err(Error::config("ssim supports 1D and 2D grids")),
    };
    if pred.len() != ny * nx || truth.len() != ny * nx {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: vec![pred.len()],
            right: vec![ny * nx],
        });
    }
    let (wy, wx) = (SSIM_WINDOW.min(ny), SSIM_WINDOW.min(nx));
    let (gy, gx) = (gaussian_window(wy), gaussian_window(wx));
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let (mut total, mut count) = (0.0, 0usize);
    for y0 in 0..=ny - wy {
        'window: for x0 in 0..=nx - wx {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..wy {
                for dx in 0..wx {
                    let i = (y0 + dy) * nx + x0 + dx;
                    if excluded(mask, i) {
                        continue 'window;
                    }
                    let w = gy[dy] * gx[dx];
                    let (a, b) = (pred[i] as f64, truth[i] as f64);
                    mx += w * a;
                    my += w * b;
                    sxx += w * a * a;
                    syy += w * b * b;
                    sxy += w * (a * b);
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * (mx * my) + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Mean over frames of the SSIM of one channel (`channel` indexes the
/// channel-major state layout).
pub fn ssim_trajectory(
    pred: &Tensor<f32>,
    truth: &Tensor<f32>,
    grid_shape: &[usize],
    channel: usize,
    dynamic_range: f64,
    mask: Option<&[bool]>,
) -> Result<Option<f64>> {
    check_pair(pred, truth)?;
    let cells: usize = grid_shape.iter().product();
    let range = channel * cells..(channel + 1) * cells;
    let cell_mask = mask.map(|m| if m.len() == cells { m } else { &m[range.clone()] });
    let mut scores = Vec::with_capacity(truth.rows());
    for t in 0..truth.rows() {
        if let Some(s) = ssim_frame(
            &pred.row(t)[range.clone()],
            &truth.row(t)[range.clone()],
            grid_shape,
            dynamic_range,
            cell_mask,
        )? {
            scores.push(s);
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub frames: usize,
    pub rmse: f64,
    pub nrmse: f64,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: Channel,
    pub data_range: f64,
    pub full: RegionMetrics,
    pub observed: Option<RegionMetrics>,
    pub generated: Option<RegionMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub observed: bool,
    pub rmse: f64,
    pub nrmse: f64,
    pub ssim: Option<f64>,
}

/// Whole-trajectory and per-region scores. Every `nrmse` in the report is
/// the matching `rmse` over the full-trajectory truth range `data_range` (per
/// channel for channel entries).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub nrmse: f64,
    pub ssim: Option<f64>,
    pub data_range: f64,
    pub observed: Option<RegionMetrics>,
    pub generated: Option<RegionMetrics>,
    pub channels: Vec<ChannelMetrics>,
    pub per_frame: Vec<FrameMetrics>,
}

fn rows_where(t: &Tensor<f32>, keep: &[bool]) -> Option<Tensor<f32>> {
    let rows: Vec<&[f32]> = (0..t.rows()).filter(|&r| keep[r]).map(|r| t.row(r)).collect();
    if rows.is_empty() {
        return None;
    }
    let data = rows.concat();
    Some(Tensor::new(vec![rows.len(), t.cols()], data).expect("row gather"))
}

fn columns(t: &Tensor<f32>, range: std::ops::Range<usize>) -> Tensor<f32> {
    let data: Vec<f32> = (0..t.rows()).flat_map(|r| t.row(r)[range.clone()].to_vec()).collect();
    Tensor::new(vec![t.rows(), range.len()], data).expect("column gather")
}

impl MetricsReport {
    /// `observed[t]` marks frames that came from sensor data; `None` means
    /// no region split. SSIM is computed per channel when `with_ssim`.
    pub fn compute(pred: &Tensor<f32>, truth: &FieldSequence, observed: Option<&[bool]>, with_ssim: bool) -> Result<Self> {
        let tf = &truth.frames;
        check_pair(pred, tf)?;
        if let Some(o) = observed {
            if o.len() != tf.rows() {
                return Err(Error::config("observed mask length differs from frame count"));
            }
        }
        let mask = truth.mask.as_deref();
        let cells = truth.cells();
        let delta = data_range(tf, mask);

        let region = |p: &Tensor<f32>, y: &Tensor<f32>, delta: f64, grid: Option<usize>| -> Result<RegionMetrics> {
            let ssim = match grid {
                Some(ch) if with_ssim => ssim_trajectory(p, y, &truth.grid_shape, ch, delta, mask)?,
                _ => None,
            };
            Ok(RegionMetrics {
                frames: y.rows(),
                rmse: rmse(p, y, mask)?,
                nrmse: nrmse_with_range(p, y, mask, delta)?,
                ssim,
            })
        };
        let split = |p: &Tensor<f32>, y: &Tensor<f32>, delta: f64, ch: Option<usize>, want_obs: bool| -> Result<Option<RegionMetrics>> {
            let Some(o) = observed else { return Ok(None) };
            let keep: Vec<bool> = o.iter().map(|&v| v == want_obs).collect();
            match (rows_where(p, &keep), rows_where(y, &keep)) {
                (Some(a), Some(b)) => Ok(Some(region(&a, &b, delta, ch)?)),
                _ => Ok(None),
            }
        };

        let mut channels = Vec::with_capacity(truth.channels.len());
        for (c, &channel) in truth.channels.iter().enumerate() {
            let (p, y) = (columns(pred, c * cells..(c + 1) * cells), columns(tf, c * cells..(c + 1) * cells));
            let d = data_range(&y, mask);
            channels.push(ChannelMetrics {
                channel,
                data_range: d,
                full: region(&p, &y, d, Some(0))?,
                observed: split(&p, &y, d, Some(0), true)?,
                generated: split(&p, &y, d, Some(0), false)?,
            });
        }
        let single = truth.channels.len() == 1;
        let ssim = if single { channels[0].full.ssim } else { None };

        let mut per_frame = Vec::with_capacity(tf.rows());
        for t in 0..tf.rows() {
            let (p, y) = (pred.slice_rows(t, t + 1)?, tf.slice_rows(t, t + 1)?);
            let e = rmse(&p, &y, mask)?;
            let s = if with_ssim && single {
                ssim_frame(p.data(), y.data(), &truth.grid_shape, delta, mask)?
            } else {
                None
            };
            per_frame.push(FrameMetrics {
                frame: t,
                observed: observed.is_some_and(|o| o[t]),
                rmse: e,
                nrmse: e / delta,
                ssim: s,
            });
        }
        let full_rmse = rmse(pred, tf, mask)?;
        Ok(MetricsReport {
            rmse: full_rmse,
            nrmse: nrmse_with_range(pred, tf, mask, delta)?,
            ssim,
            data_range: delta,
            observed: split(pred, tf, delta, single.then_some(0), true)?,
            generated: split(pred, tf, delta, single.then_some(0), false)?,
            channels,
            per_frame,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,observed,rmse,nrmse,ssim\n");
        for f in &self.per_frame {
            let ssim = f.ssim.map(|s| format!("{s:.9e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{:.9e},{:.9e},{}", f.frame, u8::from(f.observed), f.rmse, f.nrmse, ssim);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Backward error at one time of the linear toy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBackwardRow {
    pub t: f64,
    /// Propagated per-mode amplitudes of the error.
    pub modewise: Vec<f64>,
    /// `e^{γ_j (T−t)} ε_j`.
    pub expected: Vec<f64>,
    pub max_rel_error: f64,
    pub norm: f64,
    /// `e^{γ_max (T−t)} ‖ε‖`.
    pub bound: f64,
    pub bound_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBackwardReport {
    pub rows: Vec<LinearBackwardRow>,
}

impl LinearBackwardReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn bound_holds(&self) -> bool {
        self.rows.iter().all(|r| r.bound_holds)
    }
}

/// Place the terminal error `Σ ε_j φ_j` on an `n`-point toy with decay
/// rates `gammas`, propagate it backward to each `t` through the toy's own
/// solution operator, and compare with the closed form mode by mode.
pub fn validate_linear_backward(n: usize, gammas: &[f64], horizon: f64, eps: &[f64], t_grid: &[f64]) -> Result<LinearBackwardReport> {
    if gammas.len() != eps.len() || gammas.len() > n {
        return Err(Error::config("need one error amplitude per mode and at most n modes"));
    }
    let toy = LinearToy::new(n, gammas.to_vec(), vec![0.0; gammas.len()])?;
    let g_max = toy.max_gamma();
    let delta_t = toy.synthesize(eps);
    let eps_norm = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if t > horizon {
            return Err(Error::config("validation times must not exceed the horizon"));
        }
        let back = toy.propagate(&delta_t, -(horizon - t));
        let modewise = toy.project(&back);
        let expected: Vec<f64> = gammas.iter().zip(eps).map(|(g, e)| (g * (horizon - t)).exp() * e).collect();
        let max_rel_error = modewise
            .iter()
            .zip(&expected)
            .map(|(a, b)| if *b == 0.0 { a.abs() } else { ((a - b) / b).abs() })
            .fold(0.0, f64::max);
        let norm = back.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bound = (g_max * (horizon - t)).exp() * eps_norm;
        rows.push(LinearBackwardRow {
            t,
            modewise,
            expected,
            max_rel_error,
            norm,
            bound,
            bound_holds: norm <= bound * (1.0 + 1e-12),
        });
    }
    Ok(LinearBackwardReport { rows })
}
