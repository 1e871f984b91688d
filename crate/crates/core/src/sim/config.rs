use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorSpec;
use crate::attacks::AttackSpec;
use crate::datasets::{
    load_mnist_idx, partition_dirichlet, partition_iid, partition_shards, synth_blobs, Dataset,
    Partition,
};
use crate::error::{Error, Result};
use crate::models::{Architecture, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Shards {
        #[serde(default = "default_classes_per_participant")]
        classes_per_participant: usize,
        shard_size: Option<usize>,
    },
    Dirichlet {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Iid,
}

fn default_classes_per_participant() -> usize {
    2
}
fn default_alpha() -> f64 {
    0.9
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Shards {
            classes_per_participant: default_classes_per_participant(),
            shard_size: None,
        }
    }
}

impl PartitionSpec {
    pub fn apply(&self, ds: &Dataset, participants: usize, seed: u64) -> Result<Partition> {
        match *self {
            PartitionSpec::Shards {
                classes_per_participant,
                shard_size,
            } => partition_shards(ds, participants, classes_per_participant, shard_size, seed),
            PartitionSpec::Dirichlet { alpha } => partition_dirichlet(ds, participants, alpha, seed),
            PartitionSpec::Iid => partition_iid(ds, participants, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Isotropic Gaussian classes generated on the fly.
    Blobs {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    /// MNIST-style IDX files. Relative paths resolve against the config file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    /// Keep at most this many training samples.
    pub cap: Option<usize>,
    pub test_cap: Option<usize>,
    #[serde(default)]
    pub partition: PartitionSpec,
}

/// Train and test data ready for partitioning.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetSpec {
    pub fn load(&self, seed: u64, base_dir: Option<&Path>) -> Result<LoadedData> {
        let (train, test) = match &self.source {
            DataSource::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            } => (
                synth_blobs(*classes, *dim, *train_per_class, *spread, seed)?,
                synth_blobs(*classes, *dim, *test_per_class, *spread, seed ^ 0x7E57_7E57)?,
            ),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let resolve = |p: &PathBuf| match base_dir {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p.clone(),
                };
                (
                    load_mnist_idx(&resolve(train_images), &resolve(train_labels))?,
                    load_mnist_idx(&resolve(test_images), &resolve(test_labels))?,
                )
            }
        };
        Ok(LoadedData {
            train: truncate(train, self.cap),
            test: truncate(test, self.test_cap),
        })
    }
}

fn truncate(ds: Dataset, cap: Option<usize>) -> Dataset {
    match cap {
        Some(cap) if cap < ds.len() => ds.subset(&(0..cap).collect::<Vec<_>>()),
        _ => ds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Softmax,
    Mlp { hidden: usize },
}

impl ModelSpec {
    pub fn architecture(&self, inputs: usize, classes: usize) -> Result<Architecture> {
        match *self {
            ModelSpec::Softmax => Architecture::softmax_regression(inputs, classes),
            ModelSpec::Mlp { hidden } => Architecture::mlp(inputs, hidden, classes),
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_rounds() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    pub participants: usize,
    /// Number of attackers; ignored when `attacker_ids` is given.
    #[serde(default)]
    pub attackers: usize,
    pub attacker_ids: Option<Vec<usize>>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub aggregator: AggregatorSpec,
    /// Record wall-clock time per round. Off gives byte-identical reruns.
    #[serde(default = "default_true")]
    pub wall_clock: bool,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_attackers(&self) -> usize {
        self.attacker_ids.as_ref().map_or(self.attackers, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.participants == 0 {
            return Err(Error::Config("participants must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        let n = self.num_attackers();
        if n >= self.participants && n > 0 {
            return Err(Error::Config(format!(
                "{n} attackers leave no honest participant among {}",
                self.participants
            )));
        }
        if let Some(ids) = &self.attacker_ids {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ids.len() || sorted.last().is_some_and(|&i| i >= self.participants) {
                return Err(Error::Config("attacker_ids must be distinct participant indices".into()));
            }
        }
        self.train.validate()?;
        self.attack.validate()?;
        self.aggregator.validate()?;
        Ok(())
    }
}
