use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lapis_core::shred::ShredMode;
use lapis_core::temporal::TemporalKind;
use lapis_core::{Direction, ExperimentConfig, System};

use crate::usage;

#[derive(Parser, Debug)]
#[command(name = "lapis", version, about = "Sparse-sensor reconstruction from short observation windows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate an ensemble plus a held-out ground-truth run and place sensors.
    Simulate(SimulateArgs),
    /// Train SHRED, then the temporal model, on a dataset.
    Train(TrainArgs),
    /// Reconstruct a member's trajectory from its sensor window.
    Infer(InferArgs),
    /// Score an inference result against the member's fields.
    Evaluate(EvaluateArgs),
    /// Sweep one setting over several seeds.
    Ablate(AblateArgs),
    /// Render snapshot strips, loss curves and sweep curves as PNG + CSV.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Frame,
    Seq2seq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Backward,
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TemporalArg {
    Seq2seq,
    Ar,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Backward => Direction::Backward,
            DirectionArg::Forward => Direction::Forward,
        }
    }
}

/// Observation-window flags shared by training and inference.
#[derive(Args, Debug, Clone, Default)]
pub struct WindowArgs {
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// Observed frames `W+1`.
    #[arg(long, conflicts_with = "obs_fraction")]
    pub window_frames: Option<usize>,
    /// Observed fraction of the trajectory.
    #[arg(long)]
    pub obs_fraction: Option<f64>,
    /// Terminal padding length; 0 disables it.
    #[arg(long)]
    pub padding: Option<usize>,
    /// Generated frames for forward inference.
    #[arg(long)]
    pub horizon: Option<usize>,
}

impl WindowArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(d) = self.direction {
            cfg.direction = d.into();
        }
        if let Some(w) = self.window_frames {
            cfg.window_frames = Some(w);
            cfg.obs_fraction = None;
        }
        if let Some(f) = self.obs_fraction {
            cfg.obs_fraction = Some(f);
            cfg.window_frames = None;
        }
        if let Some(l) = self.padding {
            cfg.padding = l;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = Some(h);
        }
        cfg.sync_padding();
    }
}

/// Experiment settings. A `--config` file fills in the system preset and
/// flags override both.
#[derive(Args, Debug, Clone, Default)]
pub struct ExperimentArgs {
    /// TOML experiment file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ks2d, kolmogorov2d, kvs or linear.
    #[arg(long)]
    pub system: Option<System>,
    /// Ensemble size K.
    #[arg(long)]
    pub ensemble: Option<usize>,
    /// Sensor count p.
    #[arg(long)]
    pub sensors: Option<usize>,
    /// Frame-mode lag.
    #[arg(long)]
    pub lag: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub temporal: Option<TemporalArg>,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Seeds data generation, sensor placement, initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid size, `N` or `NxM`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Saved frames per trajectory `T+1`.
    #[arg(long)]
    pub frames: Option<usize>,
    /// SHRED hidden size.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Temporal model hidden size.
    #[arg(long)]
    pub temporal_hidden: Option<usize>,
    #[arg(long)]
    pub shred_epochs: Option<usize>,
    #[arg(long)]
    pub temporal_epochs: Option<usize>,
}

fn parse_grid(spec: &str, dims: usize) -> anyhow::Result<Vec<usize>> {
    let parts: Vec<usize> = spec
        .split(['x', 'X'])
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad --grid '{spec}'")))?;
    match parts.len() {
        1 => Ok(vec![parts[0]; dims]),
        n if n == dims => Ok(parts),
        n => Err(usage(format!("--grid has {n} sizes, the system is {dims}-dimensional"))),
    }
}

impl ExperimentArgs {
    /// Preset < config file (`--config`, else `fallback` when it exists) < flags.
    pub fn resolve(&self, fallback: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
        let file = self
            .config
            .clone()
            .or_else(|| fallback.map(Path::to_path_buf).filter(|p| p.exists()));
        let mut table = match &file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        if let Some(system) = self.system {
            let sim = table
                .entry("sim")
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| usage("`sim` must be a table"))?;
            let file_system = sim.get("system").and_then(|v| v.as_str()).map(str::parse::<System>).transpose()?;
            if file_system.is_some_and(|s| s != system) {
                // A different system invalidates the file's simulation block.
                return Err(usage(format!("--system {} contradicts the config file", system.name())));
            }
            sim.insert("system".into(), toml::Value::try_from(system)?);
        }
        let mut cfg = ExperimentConfig::from_toml_str(&toml::to_string(&table)?)?;
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> anyhow::Result<()> {
        if let Some(k) = self.ensemble {
            cfg.ensemble = k;
        }
        if let Some(p) = self.sensors {
            cfg.sensors = p;
        }
        if let Some(m) = self.mode {
            let mode = match m {
                ModeArg::Frame => ShredMode::Frame,
                ModeArg::Seq2seq => ShredMode::Seq2seq,
            };
            if mode != cfg.shred.mode {
                cfg.shred.mode = mode;
                (cfg.shred.layers, cfg.shred.lag) = match mode {
                    ShredMode::Frame => (2, 10),
                    ShredMode::Seq2seq => (1, 1),
                };
            }
        }
        if let Some(lag) = self.lag {
            cfg.shred.lag = lag;
        }
        if let Some(t) = self.temporal {
            cfg.temporal.kind = match t {
                TemporalArg::Seq2seq => TemporalKind::Seq2seq,
                TemporalArg::Ar => TemporalKind::Ar,
            };
        }
        self.window.apply(cfg);
        if let Some(g) = &self.grid {
            cfg.sim.grid = parse_grid(g, cfg.sim.grid.len())?;
        }
        if let Some(f) = self.frames {
            cfg.sim.frames = f;
        }
        if let Some(h) = self.hidden {
            cfg.shred.hidden = h;
        }
        if let Some(h) = self.temporal_hidden {
            cfg.temporal.hidden = h;
        }
        if let Some(e) = self.shred_epochs {
            cfg.shred.train.epochs = e;
        }
        if let Some(e) = self.temporal_epochs {
            cfg.temporal.train.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Dataset from `simulate`; simulated into `<out>/data` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Member index; the ground-truth member when absent.
    #[arg(long)]
    pub member: Option<usize>,
    #[command(flatten)]
    pub window: WindowArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory written by `infer`.
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Member index; taken from the inference record when absent.
    #[arg(long)]
    pub member: Option<usize>,
    #[arg(long)]
    pub no_ssim: bool,
    /// Defaults to the result directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Sensor count p.
    Sensors,
    /// Temporal model hidden size.
    Hidden,
    /// Window length W (W+1 observed frames).
    Window,
    /// Terminal padding length L.
    Padding,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
    /// Runs per value, seeded `seed, seed+1, ...`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub no_ssim: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Inference result for snapshot strips.
    #[arg(long)]
    pub result: Option<PathBuf>,
    /// Dataset supplying ground truth for the strips.
    #[arg(long, requires = "result")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub member: Option<usize>,
    /// Snapshot columns, evenly spaced over the trajectory.
    #[arg(long, default_value_t = 4)]
    pub snapshots: usize,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Training directory for loss curves.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Ablation directory for sweep curves.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
