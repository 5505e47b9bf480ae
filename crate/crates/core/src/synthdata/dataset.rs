use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Marker, PathShape, Relation, Scenario, ScenarioKind};
use crate::error::{Error, Result};

/// Approach, recede, orbit plus three static markers.
pub fn interaction_classes() -> Vec<ScenarioKind> {
    vec![
        ScenarioKind::Interaction {
            relation: Relation::Approach,
        },
        ScenarioKind::Interaction {
            relation: Relation::Recede,
        },
        ScenarioKind::Interaction {
            relation: Relation::Orbit,
        },
        ScenarioKind::Appearance {
            marker: Marker::Disc { radius: 4 },
        },
        ScenarioKind::Appearance {
            marker: Marker::Ring { outer: 5, inner: 3 },
        },
        ScenarioKind::Appearance {
            marker: Marker::Cross { arm: 4 },
        },
    ]
}

pub fn trajectory_classes() -> Vec<ScenarioKind> {
    [PathShape::Line, PathShape::OutAndBack, PathShape::Loop, PathShape::Corner]
        .into_iter()
        .map(|path| ScenarioKind::Trajectory { path })
        .collect()
}

pub fn class_names(classes: &[ScenarioKind]) -> Vec<String> {
    classes.iter().map(ScenarioKind::name).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Class `k` is generated by `classes[k]`.
    pub classes: Vec<ScenarioKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Frames per clip.
    pub length: usize,
    pub frame_size: usize,
    /// Uniform noise amplitude in 1/256 intensity steps.
    pub noise: i64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: interaction_classes(),
            train_per_class: 100,
            test_per_class: 50,
            length: 16,
            frame_size: 32,
            noise: 8,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        let distinct: HashSet<_> = self.classes.iter().collect();
        if distinct.len() != self.classes.len() {
            return Err(Error::Config("duplicate generator kind in class list".into()));
        }
        if self.length < 2 {
            return Err(Error::Config(format!("clip length {} < 2", self.length)));
        }
        if !(0..=256).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside 0..=256", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One line of a manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub class: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub length: usize,
}

/// Clip seed: low 32 bits of the dataset seed on top, split on bit 31,
/// clip index below, so the two splits never share a seed.
fn clip_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    let split_bit = match split {
        Split::Train => 0,
        Split::Test => 1u64 << 31,
    };
    ((dataset_seed & 0xffff_ffff) << 32) | split_bit | (index as u64 & 0x7fff_ffff)
}

/// Emits `per_class` clips of every class, interleaved class by class.
pub fn build_split(config: &DatasetConfig, split: Split) -> Result<Vec<ManifestEntry>> {
    config.validate()?;
    let per_class = match split {
        Split::Train => config.train_per_class,
        Split::Test => config.test_per_class,
    };
    let k = config.classes.len();
    (0..per_class * k)
        .map(|i| {
            let class = i % k;
            let seed = clip_seed(config.seed, split, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scenario = Scenario::sample(class, config.classes[class], config.frame_size, config.noise, &mut rng)?;
            let tag = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            Ok(ManifestEntry {
                id: format!("{tag}-{i:05}"),
                class,
                scenario,
                seed,
                length: config.length,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path)?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Data(format!("{}:{}: {err}", path.display(), n + 1)))?;
        if e.class != e.scenario.class {
            return Err(Error::Data(format!("{}:{}: class disagrees with scenario", path.display(), n + 1)));
        }
        entries.push(e);
    }
    Ok(entries)
}
