use std::fmt::Write as _;
use std::path::Path;

use lapis_core::io::{ensure_dir, write_json};
use lapis_core::pipeline::run_on_dataset;
use lapis_core::sensing::{simulate_ensemble, Split};
use lapis_core::sim::FieldSequence;
use lapis_core::{EnsembleDataset, ExperimentConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::{AblateArgs, Axis};
use crate::usage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    pub seed: u64,
    pub nrmse: f64,
    pub ssim: Option<f64>,
    pub generated_nrmse: Option<f64>,
    pub baseline_nrmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub value: usize,
    pub runs: usize,
    pub nrmse_mean: f64,
    pub nrmse_std: f64,
    pub ssim_mean: Option<f64>,
    pub ssim_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<SummaryRow>,
}

pub fn apply_axis(cfg: &mut ExperimentConfig, axis: Axis, value: usize) {
    match axis {
        Axis::Sensors => cfg.sensors = value,
        Axis::Hidden => cfg.temporal.hidden = value,
        Axis::Window => {
            cfg.window_frames = Some(value + 1);
            cfg.obs_fraction = None;
        }
        Axis::Padding => cfg.padding = value,
    }
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(values: &[usize], rows: &[AblationRow]) -> Vec<SummaryRow> {
    values
        .iter()
        .map(|&value| {
            let runs: Vec<&AblationRow> = rows.iter().filter(|r| r.value == value).collect();
            let nrmse: Vec<f64> = runs.iter().map(|r| r.nrmse).collect();
            let ssim: Option<Vec<f64>> = runs.iter().map(|r| r.ssim).collect();
            let (nrmse_mean, nrmse_std) = mean_std(&nrmse);
            let ssim = ssim.filter(|s| !s.is_empty()).map(|s| mean_std(&s));
            SummaryRow {
                value,
                runs: runs.len(),
                nrmse_mean,
                nrmse_std,
                ssim_mean: ssim.map(|s| s.0),
                ssim_std: ssim.map(|s| s.1),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_default()
}

fn write_csv(dir: &Path, table: &AblationTable) -> anyhow::Result<()> {
    let mut rows = String::from("value,seed,nrmse,ssim,generated_nrmse,baseline_nrmse\n");
    for r in &table.rows {
        writeln!(
            rows,
            "{},{},{:.9e},{},{},{:.9e}",
            r.value,
            r.seed,
            r.nrmse,
            opt(r.ssim),
            opt(r.generated_nrmse),
            r.baseline_nrmse
        )?;
    }
    std::fs::write(dir.join("ablation.csv"), rows)?;
    let mut summary = String::from("value,runs,nrmse_mean,nrmse_std,ssim_mean,ssim_std\n");
    for s in &table.summary {
        writeln!(
            summary,
            "{},{},{:.9e},{:.9e},{},{}",
            s.value,
            s.runs,
            s.nrmse_mean,
            s.nrmse_std,
            opt(s.ssim_mean),
            opt(s.ssim_std)
        )?;
    }
    std::fs::write(dir.join("ablation_summary.csv"), summary)?;
    Ok(())
}

pub fn run(a: &AblateArgs) -> anyhow::Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let base = a.exp.resolve(None)?;
    for &v in &a.values {
        let mut c = base.clone();
        apply_axis(&mut c, a.axis, v);
        c.validate()?;
    }
    ensure_dir(&a.out)?;
    base.save(&a.out.join("config.toml"))?;

    let seeds: Vec<u64> = (0..a.seeds).map(|s| base.seed.wrapping_add(s)).collect();
    // None of the axes touches the simulation, so each seed's ensemble is
    // simulated once and shared by every value.
    let ensembles: Vec<Vec<(FieldSequence, Split)>> = seeds
        .par_iter()
        .map(|&s| {
            let mut c = base.clone();
            c.set_seed(s);
            simulate_ensemble(&c.sim, c.ensemble)
        })
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(usize, usize)> = a.values.iter().flat_map(|&v| (0..seeds.len()).map(move |k| (v, k))).collect();
    log::info!("ablating {:?} over {} runs", a.axis, jobs.len());
    let rows: Vec<AblationRow> = jobs
        .par_iter()
        .map(|&(value, k)| -> anyhow::Result<AblationRow> {
            let mut cfg = base.clone();
            cfg.set_seed(seeds[k]);
            apply_axis(&mut cfg, a.axis, value);
            let ds = EnsembleDataset::build(ensembles[k].clone(), cfg.sensors, cfg.sensor_seed)?;
            let dir = a.out.join("runs").join(format!("{value}_seed{}", seeds[k]));
            let o = run_on_dataset(&cfg, &ds, &dir, !a.no_ssim)?;
            Ok(AblationRow {
                value,
                seed: seeds[k],
                nrmse: o.lapis.nrmse,
                ssim: o.lapis.ssim,
                generated_nrmse: o.lapis.generated.as_ref().map(|g| g.nrmse),
                baseline_nrmse: o.baseline.nrmse,
            })
        })
        .collect::<anyhow::Result<_>>()?;

    let table = AblationTable {
        axis: a.axis,
        summary: summarize(&a.values, &rows),
        rows,
    };
    write_csv(&a.out, &table)?;
    write_json(&a.out.join("ablation.json"), &table)?;
    for s in &table.summary {
        println!(
            "{:?}={}: nrmse {:.4} ± {:.4} over {} runs",
            a.axis, s.value, s.nrmse_mean, s.nrmse_std, s.runs
        );
    }
    Ok(())
}
