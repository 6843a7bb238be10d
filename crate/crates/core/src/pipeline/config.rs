use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shred::{ShredMode, ShredTrainConfig};
use crate::sim::{SimConfig, System};
use crate::temporal::{Direction, TemporalKind, TemporalTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShredSection {
    pub mode: ShredMode,
    pub hidden: usize,
    pub layers: usize,
    pub lag: usize,
    pub decoder_hidden: Vec<usize>,
    pub train: ShredTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalSection {
    pub kind: TemporalKind,
    pub hidden: usize,
    /// AR lookback; defaults to the observed window length.
    pub ar_window: Option<usize>,
    pub train: TemporalTrainConfig,
}

/// Everything needed to reproduce one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    /// Ensemble size `K` (the last member validates when `K ≥ 2`).
    pub ensemble: usize,
    pub sensors: usize,
    pub sensor_seed: u64,
    /// Observed frames `W+1`; exclusive with `obs_fraction`.
    pub window_frames: Option<usize>,
    pub obs_fraction: Option<f64>,
    pub direction: Direction,
    /// Terminal padding length `L`; 0 disables it.
    pub padding: usize,
    /// Generated frames for forward inference; defaults to the rest of the trajectory.
    pub horizon: Option<usize>,
    pub seed: u64,
    pub shred: ShredSection,
    pub temporal: TemporalSection,
}

impl ExperimentConfig {
    pub fn preset(system: System) -> Self {
        let frame = |hidden| ShredSection {
            mode: ShredMode::Frame,
            hidden,
            layers: 2,
            lag: 10,
            decoder_hidden: vec![350, 350],
            train: ShredTrainConfig::default(),
        };
        let seq = |hidden| ShredSection {
            mode: ShredMode::Seq2seq,
            hidden,
            layers: 1,
            lag: 1,
            decoder_hidden: vec![350, 350],
            train: ShredTrainConfig::default(),
        };
        let temporal = TemporalSection {
            kind: TemporalKind::Seq2seq,
            hidden: 64,
            ar_window: None,
            train: TemporalTrainConfig::default(),
        };
        let base = ExperimentConfig {
            sim: SimConfig::defaults_for(system),
            ensemble: 8,
            sensors: 3,
            sensor_seed: 0,
            window_frames: Some(10),
            obs_fraction: None,
            direction: Direction::Backward,
            padding: 0,
            horizon: None,
            seed: 0,
            shred: frame(64),
            temporal,
        };
        let mut cfg = match system {
            System::Ks => base,
            System::Kolmogorov => ExperimentConfig {
                ensemble: 15,
                sensors: 8,
                ..base
            },
            System::Kvs => ExperimentConfig {
                sensors: 5,
                window_frames: None,
                obs_fraction: Some(0.1),
                shred: seq(80),
                ..base
            },
            System::Linear => ExperimentConfig {
                sensors: 8,
                padding: 16,
                shred: seq(32),
                temporal: TemporalSection {
                    hidden: 32,
                    ..base.temporal.clone()
                },
                ..base
            },
        };
        cfg.sync_padding();
        cfg
    }

    /// The top-level `padding` also drives SHRED training augmentation.
    pub fn sync_padding(&mut self) {
        self.shred.train.padding = self.padding;
    }

    pub fn system(&self) -> System {
        self.sim.system
    }

    /// Sets the data, initialization and shuffling seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sim.seed = seed;
        self.sensor_seed = seed;
        self.shred.train.seed = seed;
        self.temporal.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.ensemble < 2 {
            return Err(Error::config("ensemble needs at least 2 members (train + validation)"));
        }
        if self.sensors == 0 {
            return Err(Error::config("sensor count must be positive"));
        }
        match (self.window_frames, self.obs_fraction) {
            (Some(0), _) => return Err(Error::config("window_frames must be at least 1")),
            (Some(_), None) => {}
            (None, Some(f)) if f > 0.0 && f <= 1.0 => {}
            (None, Some(f)) => return Err(Error::config(format!("obs_fraction {f} outside (0, 1]"))),
            _ => return Err(Error::config("set exactly one of window_frames and obs_fraction")),
        }
        if self.observed_frames(self.sim.frames) > self.sim.frames {
            return Err(Error::config("observed window is longer than the trajectory"));
        }
        if self.temporal.kind == TemporalKind::Ar && self.direction == Direction::Backward {
            return Err(Error::config("the AR model only runs forward"));
        }
        if self.shred.train.padding != self.padding {
            return Err(Error::config("shred.train.padding must equal padding"));
        }
        if self.temporal.ar_window == Some(0) {
            return Err(Error::config("ar_window must be at least 1"));
        }
        Ok(())
    }

    /// `W+1` for a trajectory of `total` frames.
    pub fn observed_frames(&self, total: usize) -> usize {
        match (self.window_frames, self.obs_fraction) {
            (Some(w), _) => w,
            (None, Some(f)) => ((f * total as f64).round() as usize).clamp(1, total),
            (None, None) => total,
        }
    }

    /// Number of frames the temporal model generates.
    pub fn generated_frames(&self, total: usize) -> usize {
        let observed = self.observed_frames(total);
        match self.direction {
            Direction::Backward => total.saturating_sub(observed),
            Direction::Forward => self.horizon.unwrap_or(total.saturating_sub(observed)),
        }
    }

    pub fn ar_window(&self, total: usize) -> usize {
        self.temporal.ar_window.unwrap_or_else(|| self.observed_frames(total))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Parses a possibly partial file: keys not given take the preset of the
    /// file's `sim.system` (KS when absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let system = user
            .get("sim")
            .and_then(|s| s.get("system"))
            .and_then(|s| s.as_str())
            .map(str::parse)
            .transpose()?
            .unwrap_or(System::Ks);
        let mut preset = toml::Table::try_from(Self::preset(system)).map_err(|e| Error::config(e.to_string()))?;
        for (given, other) in [("window_frames", "obs_fraction"), ("obs_fraction", "window_frames")] {
            if user.contains_key(given) {
                preset.remove(other);
            }
        }
        let merged = merge(preset, user);
        let mut cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.sync_padding();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

/// Recursive table merge; `over` wins on conflicts.
fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for s in System::ALL {
            let c = ExperimentConfig::preset(s);
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn partial_file_takes_system_preset() {
        let c = ExperimentConfig::from_toml_str("ensemble = 3\n[sim]\nsystem = \"kvs\"\n[shred.train]\nepochs = 7\n").unwrap();
        assert_eq!(c.ensemble, 3);
        assert_eq!(c.shred.hidden, 80);
        assert_eq!(c.shred.train.epochs, 7);
        assert_eq!(c.shred.train.patience, 50);
        assert_eq!(c.observed_frames(141), 14);
        let w = ExperimentConfig::from_toml_str("window_frames = 5\n[sim]\nsystem = \"kvs\"\n").unwrap();
        assert_eq!((w.window_frames, w.obs_fraction), (Some(5), None));
    }

    #[test]
    fn window_settings_are_checked() {
        let mut c = ExperimentConfig::preset(System::Ks);
        assert_eq!((c.observed_frames(101), c.generated_frames(101)), (10, 91));
        c.obs_fraction = Some(0.5);
        assert!(c.validate().is_err());
        c.window_frames = None;
        c.obs_fraction = Some(1.5);
        assert!(c.validate().is_err());
        c.obs_fraction = Some(1.0);
        c.validate().unwrap();
        assert_eq!(c.generated_frames(101), 0);
        c.temporal.kind = TemporalKind::Ar;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = [").is_err());
        assert!(ExperimentConfig::from_toml_str("unknown_key = 1").is_err());
    }
}
