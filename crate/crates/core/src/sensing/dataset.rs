use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{place_sensors, sample_sensors, Normalization, SensorLayout};
use crate::error::{Error, Result};
use crate::io::{ensure_dir, read_f32_le, read_json, write_f32_le, write_json};
use crate::sim::{ground_truth_config, member_config, simulate, Channel, FieldSequence, Provenance, SimConfig, System};
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    GroundTruth,
}

/// One trajectory with its raw (physical-unit) fields and sensor series.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub index: usize,
    pub split: Split,
    pub fields: FieldSequence,
    pub sensors: Tensor<f32>,
}

/// Ensemble sharing one grid, channel set, mask and sensor layout. Fields are
/// kept raw; `normalization` holds the training-member statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleDataset {
    pub system: System,
    pub layout: SensorLayout,
    pub normalization: Normalization,
    pub members: Vec<Member>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    system: System,
    grid_shape: Vec<usize>,
    channels: Vec<Channel>,
    mask: Option<Vec<bool>>,
    layout: SensorLayout,
    normalization: Normalization,
    members: Vec<MemberEntry>,
}

#[derive(Serialize, Deserialize)]
struct MemberEntry {
    index: usize,
    split: Split,
    frames: usize,
    dt_save: f64,
    provenance: Provenance,
    fields_file: String,
    sensors_file: String,
}

/// Simulate `ensemble` members plus one ground-truth run. The last ensemble
/// member is held out for validation when there are at least two.
pub fn simulate_ensemble(base: &SimConfig, ensemble: usize) -> Result<Vec<(FieldSequence, Split)>> {
    let mut out = Vec::with_capacity(ensemble + 1);
    for k in 0..ensemble {
        out.push((simulate(&member_config(base, k))?, split_for(k, ensemble)));
    }
    out.push((simulate(&ground_truth_config(base, ensemble))?, Split::GroundTruth));
    Ok(out)
}

/// Split tag of ensemble member `k` of `ensemble`.
pub fn split_for(k: usize, ensemble: usize) -> Split {
    if ensemble >= 2 && k + 1 == ensemble {
        Split::Validation
    } else {
        Split::Train
    }
}

impl EnsembleDataset {
    /// Place `p` sensors (avoiding the shared mask) and assemble.
    pub fn build(fields: Vec<(FieldSequence, Split)>, p: usize, sensor_seed: u64) -> Result<Self> {
        let first = &fields.first().ok_or_else(|| Error::config("empty ensemble"))?.0;
        let layout = place_sensors(first.width(), p, first.mask.as_deref(), sensor_seed)?;
        Self::with_layout(fields, layout)
    }

    pub fn with_layout(fields: Vec<(FieldSequence, Split)>, layout: SensorLayout) -> Result<Self> {
        let first = &fields.first().ok_or_else(|| Error::config("empty ensemble"))?.0;
        let system = first.provenance.system;
        for (f, _) in &fields {
            if f.grid_shape != first.grid_shape || f.channels != first.channels || f.mask != first.mask {
                return Err(Error::config("ensemble members disagree on grid, channels or mask"));
            }
        }
        let normalization = Normalization::fit(fields.iter().filter(|(_, s)| *s == Split::Train).map(|(f, _)| f))?;
        let members = fields
            .into_iter()
            .enumerate()
            .map(|(index, (fields, split))| {
                let sensors = sample_sensors(&fields, &layout)?;
                Ok(Member {
                    index,
                    split,
                    fields,
                    sensors,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleDataset {
            system,
            layout,
            normalization,
            members,
        })
    }

    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &Member> {
        self.members.iter().filter(move |m| m.split == split)
    }

    pub fn training(&self) -> Vec<&Member> {
        self.with_split(Split::Train).collect()
    }

    pub fn validation(&self) -> Vec<&Member> {
        self.with_split(Split::Validation).collect()
    }

    pub fn ground_truth(&self) -> Option<&Member> {
        self.with_split(Split::GroundTruth).next()
    }

    pub fn state_width(&self) -> usize {
        self.members[0].fields.width()
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.members[0].fields.mask.as_deref()
    }

    /// Normalized full states `[(T+1), n]` of a member.
    pub fn normalized_fields(&self, m: &Member) -> Tensor<f32> {
        self.normalization.normalize_states(&m.fields.frames)
    }

    pub fn normalized_sensors(&self, m: &Member) -> Tensor<f32> {
        self.normalization.normalize_sensors(&m.sensors, &self.layout)
    }

    /// Writes `manifest.json` and `member_<k>_{fields,sensors}.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let first = &self.members[0].fields;
        let mut entries = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let fields_file = format!("member_{}_fields.bin", m.index);
            let sensors_file = format!("member_{}_sensors.bin", m.index);
            write_f32_le(&dir.join(&fields_file), m.fields.frames.data())?;
            write_f32_le(&dir.join(&sensors_file), m.sensors.data())?;
            entries.push(MemberEntry {
                index: m.index,
                split: m.split,
                frames: m.fields.num_frames(),
                dt_save: m.fields.dt_save,
                provenance: m.fields.provenance.clone(),
                fields_file,
                sensors_file,
            });
        }
        let manifest = Manifest {
            format: FORMAT_VERSION,
            system: self.system,
            grid_shape: first.grid_shape.clone(),
            channels: first.channels.clone(),
            mask: first.mask.clone(),
            layout: self.layout.clone(),
            normalization: self.normalization.clone(),
            members: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.format != FORMAT_VERSION {
            return Err(Error::format(&manifest_path, format!("unsupported format {}", manifest.format)));
        }
        let cells: usize = manifest.grid_shape.iter().product();
        let width = cells * manifest.channels.len();
        let p = manifest.layout.len();
        let mut members = Vec::with_capacity(manifest.members.len());
        for e in manifest.members {
            let frames = Tensor::new(vec![e.frames, width], read_f32_le(&dir.join(&e.fields_file), e.frames * width)?)?;
            let sensors = Tensor::new(vec![e.frames, p], read_f32_le(&dir.join(&e.sensors_file), e.frames * p)?)?;
            let fields = FieldSequence::new(
                frames,
                manifest.grid_shape.clone(),
                manifest.channels.clone(),
                e.dt_save,
                manifest.mask.clone(),
                e.provenance,
            )?;
            members.push(Member {
                index: e.index,
                split: e.split,
                fields,
                sensors,
            });
        }
        if members.is_empty() {
            return Err(Error::format(&manifest_path, "no members"));
        }
        Ok(EnsembleDataset {
            system: manifest.system,
            layout: manifest.layout,
            normalization: manifest.normalization,
            members,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_ks() -> SimConfig {
        SimConfig {
            grid: vec![16, 16],
            frames: 12,
            ..SimConfig::ks()
        }
    }

    #[test]
    fn ground_truth_is_excluded_from_statistics() {
        let mut fields = simulate_ensemble(&small_ks(), 3).unwrap();
        let gt = fields.iter_mut().find(|(_, s)| *s == Split::GroundTruth).unwrap();
        gt.0.frames.data_mut()[0] = 1e6;
        let ds = EnsembleDataset::build(fields, 4, 0).unwrap();
        assert!(ds.normalization.max[0] < 1e3);
        assert_eq!(ds.training().len(), 2);
        assert_eq!(ds.validation().len(), 1);
        assert!(ds.ground_truth().is_some());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let ds = EnsembleDataset::build(simulate_ensemble(&small_ks(), 2).unwrap(), 5, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = EnsembleDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.members.iter().zip(&ds.members) {
            assert!(a
                .fields
                .frames
                .data()
                .iter()
                .zip(b.fields.frames.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let ds = EnsembleDataset::build(simulate_ensemble(&small_ks(), 2).unwrap(), 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        std::fs::write(dir.path().join("member_0_sensors.bin"), [0u8; 7]).unwrap();
        assert!(matches!(EnsembleDataset::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn mismatched_members_are_rejected() {
        let a = simulate(&small_ks()).unwrap();
        let b = simulate(&SimConfig {
            grid: vec![8, 8],
            ..small_ks()
        })
        .unwrap();
        assert!(EnsembleDataset::build(vec![(a, Split::Train), (b, Split::Train)], 2, 0).is_err());
    }
}
