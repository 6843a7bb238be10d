use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use lapis_core::io::{ensure_dir, read_json, write_json};
use lapis_core::pipeline::TrainReport;
use lapis_core::sim::FieldSequence;
use lapis_core::{EnsembleDataset, InferenceResult, MetricsReport};
use serde::Serialize;

use crate::ablate::AblationTable;
use crate::args::PlotArgs;
use crate::commands::InferenceRecord;
use crate::usage;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRAY: Rgb<u8> = Rgb([128, 128, 128]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GAP: u32 = 4;
const SERIES: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44]), Rgb([214, 39, 40])];

/// Viridis sampled at five stops.
fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let x = if t.is_finite() { t.clamp(0.0, 1.0) * 4.0 } else { 0.0 };
    let i = (x.floor() as usize).min(3);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Evenly spaced frame indices, ending on the last frame.
pub fn snapshot_frames(frames: usize, count: usize) -> Vec<usize> {
    match count {
        0 => Vec::new(),
        1 => vec![frames - 1],
        n => (0..n)
            .map(|i| ((i * (frames - 1)) as f64 / (n - 1) as f64).round() as usize)
            .collect(),
    }
}

/// One channel of one frame as `(height, width, values)`; 1-D fields become a
/// band of identical rows.
fn frame_image(f: &FieldSequence, t: usize, channel: usize) -> (usize, usize, Vec<f32>) {
    let cells = f.cells();
    let v = f.frame(t)[channel * cells..(channel + 1) * cells].to_vec();
    match f.grid_shape.as_slice() {
        [n] => (1, *n, v),
        [ny, nx] => (*ny, *nx, v),
        _ => (1, cells, v),
    }
}

struct Row {
    values: Vec<Vec<f32>>,
    lo: f32,
    hi: f32,
}

fn strip(rows: &[Row], h: usize, w: usize, mask: Option<&[bool]>) -> RgbImage {
    let scale = (128 / w.max(h)).max(1) as u32;
    let band = if h == 1 { 16 } else { 1 };
    let (th, tw) = (h as u32 * scale * band, w as u32 * scale);
    let cols = rows[0].values.len() as u32;
    let mut img = RgbImage::from_pixel(cols * (tw + GAP) - GAP, rows.len() as u32 * (th + GAP) - GAP, WHITE);
    for (r, row) in rows.iter().enumerate() {
        let span = f64::from(row.hi - row.lo).max(f64::MIN_POSITIVE);
        for (c, vals) in row.values.iter().enumerate() {
            let (x0, y0) = (c as u32 * (tw + GAP), r as u32 * (th + GAP));
            for py in 0..th {
                for px in 0..tw {
                    let k = if h == 1 {
                        (px / scale) as usize
                    } else {
                        (py / scale) as usize * w + (px / scale) as usize
                    };
                    let color = if mask.is_some_and(|m| m[k]) {
                        GRAY
                    } else {
                        colormap(f64::from(vals[k] - row.lo) / span)
                    };
                    img.put_pixel(x0 + px, y0 + py, color);
                }
            }
        }
    }
    img
}

fn range(vals: &[Vec<f32>], mask: Option<&[bool]>) -> (f32, f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for v in vals {
        for (k, &x) in v.iter().enumerate() {
            if !mask.is_some_and(|m| m[k]) {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    (lo, hi)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_default()
}

fn plot_snapshots(a: &PlotArgs, result_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let result = InferenceResult::load(result_dir)?;
    let recon = &result.reconstruction;
    let n = recon.num_frames();
    if a.channel >= recon.channels.len() {
        return Err(usage(format!(
            "channel {} out of range ({} channels)",
            a.channel,
            recon.channels.len()
        )));
    }
    if a.snapshots == 0 || a.snapshots > n {
        return Err(usage(format!("--snapshots must be in 1..={n}")));
    }
    let truth = match &a.data {
        Some(dir) => {
            let ds = EnsembleDataset::load(dir)?;
            let record = result_dir.join("inference.json");
            let index = match a.member {
                Some(k) => Some(k),
                None if record.exists() => Some(read_json::<InferenceRecord>(&record)?.member),
                None => None,
            };
            let m = match index {
                Some(k) => ds
                    .members
                    .iter()
                    .find(|m| m.index == k)
                    .ok_or_else(|| usage(format!("no member {k}")))?,
                None => ds.ground_truth().ok_or_else(|| usage("dataset has no ground-truth member"))?,
            };
            Some(m.fields.slice_frames(0, n)?)
        }
        None => None,
    };
    let frames = snapshot_frames(n, a.snapshots);
    let mask = recon.mask.as_deref();
    let (mut h, mut w) = (0, 0);
    let mut grab = |f: &FieldSequence| -> Vec<Vec<f32>> {
        frames
            .iter()
            .map(|&t| {
                let (fh, fw, v) = frame_image(f, t, a.channel);
                (h, w) = (fh, fw);
                v
            })
            .collect()
    };
    let pred = grab(recon);
    let mut rows = Vec::new();
    match &truth {
        Some(tr) => {
            let gt = grab(tr);
            let (lo, hi) = range(&gt, mask);
            let err: Vec<Vec<f32>> = gt
                .iter()
                .zip(&pred)
                .map(|(g, p)| g.iter().zip(p).map(|(x, y)| (x - y).abs()).collect())
                .collect();
            let (_, emax) = range(&err, mask);
            rows.push(Row { values: gt, lo, hi });
            rows.push(Row {
                values: pred.clone(),
                lo,
                hi,
            });
            rows.push(Row {
                values: err,
                lo: 0.0,
                hi: emax,
            });
        }
        None => {
            let (lo, hi) = range(&pred, mask);
            rows.push(Row {
                values: pred.clone(),
                lo,
                hi,
            });
        }
    }
    strip(&rows, h, w, mask).save(out.join("snapshots.png"))?;

    let mut csv = String::from("column,frame,observed,min,max\n");
    for (c, &t) in frames.iter().enumerate() {
        let (lo, hi) = range(std::slice::from_ref(&pred[c]), mask);
        writeln!(csv, "{c},{t},{},{:.9e},{:.9e}", u8::from(result.observed[t]), lo, hi)?;
    }
    std::fs::write(out.join("snapshots.csv"), csv)?;

    let per_frame = match &truth {
        Some(tr) => Some(MetricsReport::compute(&recon.frames, tr, Some(&result.observed), false)?.per_frame),
        None => None,
    };
    let mut csv = String::from("frame,observed,mean,std,rmse,nrmse\n");
    for t in 0..n {
        let v: Vec<f64> = recon
            .frame(t)
            .iter()
            .enumerate()
            .filter(|(k, _)| !mask.is_some_and(|m| m[k % m.len()]))
            .map(|(_, &x)| f64::from(x))
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let (e, ne) = match &per_frame {
            Some(p) => (Some(p[t].rmse), Some(p[t].nrmse)),
            None => (None, None),
        };
        writeln!(
            csv,
            "{t},{},{mean:.9e},{std:.9e},{},{}",
            u8::from(result.observed[t]),
            opt(e),
            opt(ne)
        )?;
    }
    std::fs::write(out.join("frames.csv"), csv)?;
    Ok(())
}

/// Line chart with optional ±band per series, drawn into a fixed canvas.
struct Chart {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
    log_y: bool,
}

const W: u32 = 640;
const H: u32 = 400;
const M: u32 = 40;

impl Chart {
    fn new(x: (f64, f64), y: (f64, f64), log_y: bool) -> Self {
        let mut img = RgbImage::from_pixel(W, H, WHITE);
        for px in M..=W - M {
            img.put_pixel(px, M, BLACK);
            img.put_pixel(px, H - M, BLACK);
        }
        for py in M..=H - M {
            img.put_pixel(M, py, BLACK);
            img.put_pixel(W - M, py, BLACK);
        }
        let y = if log_y { (y.0.log10(), y.1.log10()) } else { y };
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Chart {
            img,
            x: pad(x),
            y: pad(y),
            log_y,
        }
    }

    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let y = if self.log_y { y.log10() } else { y };
        let fx = (x - self.x.0) / (self.x.1 - self.x.0);
        let fy = (y - self.y.0) / (self.y.1 - self.y.0);
        (M as f64 + fx * (W - 2 * M) as f64, (H - M) as f64 - fy * (H - 2 * M) as f64)
    }

    fn dot(&mut self, x: f64, y: f64, c: Rgb<u8>) {
        if x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, pts: &[(f64, f64)], c: Rgb<u8>) {
        for pair in pts.windows(2) {
            let (a, b) = (self.px(pair[0].0, pair[0].1), self.px(pair[1].0, pair[1].1));
            let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
                self.dot(x, y, c);
                self.dot(x, y + 1.0, c);
            }
        }
    }

    fn band(&mut self, pts: &[(f64, f64, f64)], c: Rgb<u8>) {
        let light = Rgb(c.0.map(|v| ((u16::from(v) + 2 * 255) / 3) as u8));
        for pair in pts.windows(2) {
            let (a_lo, a_hi) = (self.px(pair[0].0, pair[0].1), self.px(pair[0].0, pair[0].2));
            let (b_lo, b_hi) = (self.px(pair[1].0, pair[1].1), self.px(pair[1].0, pair[1].2));
            let (x0, x1) = (a_lo.0.round() as i64, b_lo.0.round() as i64);
            for x in x0..=x1 {
                let f = if x1 > x0 { (x - x0) as f64 / (x1 - x0) as f64 } else { 0.0 };
                let top = a_hi.1 + f * (b_hi.1 - a_hi.1);
                let bottom = a_lo.1 + f * (b_lo.1 - a_lo.1);
                let mut y = top.min(bottom).round();
                while y <= top.max(bottom).round() {
                    self.dot(x as f64, y, light);
                    y += 1.0;
                }
            }
        }
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn plot_history(dir: &Path, out: &Path) -> anyhow::Result<()> {
    let report: TrainReport = read_json(&dir.join("train_report.json"))?;
    let series = [
        &report.shred.train,
        &report.shred.validation,
        &report.temporal.train,
        &report.temporal.validation,
    ];
    let len = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut csv = String::from("epoch,shred_train,shred_validation,temporal_train,temporal_validation\n");
    for e in 0..len {
        write!(csv, "{e}")?;
        for s in series {
            write!(csv, ",{}", opt(s.get(e).copied()))?;
        }
        csv.push('\n');
    }
    std::fs::write(out.join("loss.csv"), csv)?;

    let (lo, hi) = bounds(series.iter().flat_map(|s| s.iter().copied()).filter(|&v| v > 0.0));
    let y = if lo.is_finite() { (lo, hi) } else { (1.0, 10.0) };
    let mut chart = Chart::new((0.0, len.saturating_sub(1) as f64), y, true);
    for (s, color) in series.iter().zip(SERIES) {
        let pts: Vec<(f64, f64)> = s
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(e, &v)| (e as f64, v))
            .collect();
        chart.line(&pts, color);
    }
    chart.img.save(out.join("loss.png"))?;
    Ok(())
}

fn plot_sweep(dir: &Path, out: &Path) -> anyhow::Result<()> {
    let table: AblationTable = read_json(&dir.join("ablation.json"))?;
    let mut csv = String::from("value,runs,nrmse_mean,nrmse_std,ssim_mean,ssim_std\n");
    for s in &table.summary {
        writeln!(
            csv,
            "{},{},{:.9e},{:.9e},{},{}",
            s.value,
            s.runs,
            s.nrmse_mean,
            s.nrmse_std,
            opt(s.ssim_mean),
            opt(s.ssim_std)
        )?;
    }
    std::fs::write(out.join("sweep.csv"), csv)?;

    // Values sit at evenly spaced positions so geometric grids read evenly.
    let pts: Vec<(f64, f64, f64)> = table
        .summary
        .iter()
        .enumerate()
        .map(|(i, s)| (i as f64, s.nrmse_mean - s.nrmse_std, s.nrmse_mean + s.nrmse_std))
        .collect();
    let y = bounds(pts.iter().flat_map(|p| [p.1, p.2]));
    let y = if y.0.is_finite() { y } else { (0.0, 1.0) };
    let mut chart = Chart::new((0.0, pts.len().saturating_sub(1) as f64), y, false);
    chart.band(&pts, SERIES[0]);
    let mean: Vec<(f64, f64)> = table.summary.iter().enumerate().map(|(i, s)| (i as f64, s.nrmse_mean)).collect();
    chart.line(&mean, SERIES[0]);
    chart.img.save(out.join("sweep.png"))?;
    Ok(())
}

#[derive(Serialize)]
struct PlotRecord<'a> {
    result: Option<&'a PathBuf>,
    data: Option<&'a PathBuf>,
    member: Option<usize>,
    snapshots: usize,
    channel: usize,
    history: Option<&'a PathBuf>,
    sweep: Option<&'a PathBuf>,
}

pub fn run(a: &PlotArgs) -> anyhow::Result<()> {
    if a.result.is_none() && a.history.is_none() && a.sweep.is_none() {
        return Err(usage("nothing to plot: pass --result, --history or --sweep"));
    }
    ensure_dir(&a.out)?;
    if let Some(r) = &a.result {
        plot_snapshots(a, r, &a.out)?;
    }
    if let Some(h) = &a.history {
        plot_history(h, &a.out)?;
    }
    if let Some(s) = &a.sweep {
        plot_sweep(s, &a.out)?;
    }
    write_json(
        &a.out.join("plot.json"),
        &PlotRecord {
            result: a.result.as_ref(),
            data: a.data.as_ref(),
            member: a.member,
            snapshots: a.snapshots,
            channel: a.channel,
            history: a.history.as_ref(),
            sweep: a.sweep.as_ref(),
        },
    )?;
    println!("wrote plots to {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_spacing() {
        assert_eq!(snapshot_frames(101, 4), vec![0, 33, 67, 100]);
        assert_eq!(snapshot_frames(10, 1), vec![9]);
        assert_eq!(snapshot_frames(3, 3), vec![0, 1, 2]);
    }

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), Rgb([68, 1, 84]));
        assert_eq!(colormap(1.0), Rgb([253, 231, 37]));
        assert_eq!(colormap(f64::NAN), colormap(0.0));
    }
}
