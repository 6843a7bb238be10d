use std::path::{Path, PathBuf};

use anyhow::Context;
use lapis_core::io::{ensure_dir, read_json, write_json};
use lapis_core::pipeline::{train_all, TrainedPipeline};
use lapis_core::sensing::{simulate_ensemble, Member};
use lapis_core::{Direction, EnsembleDataset, ExperimentConfig, InferenceResult};
use serde::{Deserialize, Serialize};

use crate::args::{EvaluateArgs, InferArgs, SimulateArgs, TrainArgs};
use crate::usage;

pub fn simulate_dataset(cfg: &ExperimentConfig) -> anyhow::Result<EnsembleDataset> {
    log::info!("simulating {} members of {} plus ground truth", cfg.ensemble, cfg.system().name());
    let fields = simulate_ensemble(&cfg.sim, cfg.ensemble)?;
    Ok(EnsembleDataset::build(fields, cfg.sensors, cfg.sensor_seed)?)
}

pub fn simulate(a: &SimulateArgs) -> anyhow::Result<()> {
    let cfg = a.exp.resolve(None)?;
    ensure_dir(&a.out)?;
    let ds = simulate_dataset(&cfg)?;
    ds.save(&a.out)?;
    cfg.save(&a.out.join("config.toml"))?;
    println!("wrote {} members to {}", ds.members.len(), a.out.display());
    Ok(())
}

fn check_compatible(cfg: &ExperimentConfig, ds: &EnsembleDataset) -> anyhow::Result<()> {
    if ds.system != cfg.system() {
        return Err(usage(format!("dataset is {}, config is {}", ds.system.name(), cfg.system().name())));
    }
    if ds.layout.len() != cfg.sensors {
        return Err(usage(format!(
            "dataset has {} sensors, config asks for {}",
            ds.layout.len(),
            cfg.sensors
        )));
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let (cfg, ds) = match &a.data {
        Some(dir) => {
            let cfg = a.exp.resolve(Some(&dir.join("config.toml")))?;
            let ds = EnsembleDataset::load(dir)?;
            check_compatible(&cfg, &ds)?;
            (cfg, ds)
        }
        None => {
            let cfg = a.exp.resolve(None)?;
            let ds = simulate_dataset(&cfg)?;
            ds.save(&a.out.join("data"))?;
            cfg.save(&a.out.join("data").join("config.toml"))?;
            (cfg, ds)
        }
    };
    let (_, report) = train_all(&cfg, &ds, &a.out)?;
    let best = |h: &lapis_core::shred::History| {
        h.best_epoch
            .and_then(|e| h.validation.get(e).copied())
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4e}"))
    };
    println!(
        "trained in {:.1}s: SHRED validation {}, temporal validation {} -> {}",
        report.seconds,
        best(&report.shred),
        best(&report.temporal),
        a.out.display()
    );
    Ok(())
}

/// What `infer` ran on, so `evaluate` can find the matching truth.
#[derive(Serialize, Deserialize)]
pub struct InferenceRecord {
    pub model: PathBuf,
    pub data: PathBuf,
    pub member: usize,
    pub direction: Direction,
    pub window_start: usize,
    pub window_frames: usize,
}

fn member(ds: &EnsembleDataset, index: Option<usize>) -> anyhow::Result<&Member> {
    match index {
        Some(k) => ds
            .members
            .iter()
            .find(|m| m.index == k)
            .ok_or_else(|| usage(format!("no member {k} in dataset"))),
        None => ds.ground_truth().ok_or_else(|| usage("dataset has no ground-truth member")),
    }
}

pub fn infer(a: &InferArgs) -> anyhow::Result<()> {
    let mut pipeline = TrainedPipeline::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let mut cfg = pipeline.config.clone();
    a.window.apply(&mut cfg);
    cfg.validate()?;
    pipeline.config = cfg.clone();
    let ds = EnsembleDataset::load(&a.data)?;
    if ds.layout != pipeline.deployment.layout {
        return Err(usage("dataset sensor layout differs from the trained model's"));
    }
    let m = member(&ds, a.member)?;
    let window = pipeline.window_of(&m.sensors)?;
    let result = pipeline.infer(&window)?;
    result.save(&a.out)?;
    cfg.save(&a.out.join("config.toml"))?;
    write_json(
        &a.out.join("inference.json"),
        &InferenceRecord {
            model: a.model.clone(),
            data: a.data.clone(),
            member: m.index,
            direction: cfg.direction,
            window_start: window.start(),
            window_frames: window.len(),
        },
    )?;
    println!(
        "reconstructed {} frames ({} generated) of member {} -> {}",
        result.reconstruction.num_frames(),
        result.generated_frames(),
        m.index,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationRecord<'a> {
    result: &'a Path,
    data: &'a Path,
    member: usize,
    ssim: bool,
}

pub fn evaluate(a: &EvaluateArgs) -> anyhow::Result<()> {
    let mut result = InferenceResult::load(&a.result)?;
    let ds = EnsembleDataset::load(&a.data)?;
    let recorded = a.result.join("inference.json");
    let index = match a.member {
        Some(k) => Some(k),
        None if recorded.exists() => Some(read_json::<InferenceRecord>(&recorded)?.member),
        None => None,
    };
    let m = member(&ds, index)?;
    let n = result.reconstruction.num_frames();
    if n > m.fields.num_frames() {
        return Err(usage(format!(
            "result has {n} frames, member {} has {}",
            m.index,
            m.fields.num_frames()
        )));
    }
    let truth = m.fields.slice_frames(0, n)?;
    let report = result.evaluate(&truth, !a.no_ssim)?.clone();
    let out = a.out.clone().unwrap_or_else(|| a.result.clone());
    ensure_dir(&out)?;
    report.write_json(&out.join("metrics.json"))?;
    report.write_csv(&out.join("metrics.csv"))?;
    write_json(
        &out.join("evaluation.json"),
        &EvaluationRecord {
            result: &a.result,
            data: &a.data,
            member: m.index,
            ssim: !a.no_ssim,
        },
    )?;
    let region = |r: &Option<lapis_core::metrics::RegionMetrics>| r.as_ref().map_or_else(|| "n/a".into(), |r| format!("{:.4}", r.nrmse));
    println!(
        "nrmse {:.4} (observed {}, generated {}), ssim {}",
        report.nrmse,
        region(&report.observed),
        region(&report.generated),
        report.ssim.map_or_else(|| "n/a".into(), |s| format!("{s:.4}"))
    );
    Ok(())
}
