use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aro_core::perturb::PerturbationStrategy;
use aro_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scenes: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub image_embeddings: Option<PathBuf>,
    pub text_embeddings: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MineTask {
    Relation,
    Attribution,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineConfig {
    pub task: MineTask,
    /// Predicates treated as symmetric in addition to the built-in ones.
    pub symmetric: Vec<String>,
    /// Predicate → inverse; self-inverse entries are blocked.
    pub inverses: BTreeMap<String, String>,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            task: MineTask::Both,
            symmetric: Vec::new(),
            inverses: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub strategies: Vec<PerturbationStrategy>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            strategies: PerturbationStrategy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub ks: Vec<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighborConfig {
    pub k: usize,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        Self { k: 3 }
    }
}

/// Everything a run can be configured with; see the README for the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub paths: Paths,
    pub mine: MineConfig,
    pub perturb: PerturbConfig,
    pub neighbors: NeighborConfig,
    pub retrieval: RetrievalConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            paths: Paths::default(),
            mine: MineConfig::default(),
            perturb: PerturbConfig::default(),
            neighbors: NeighborConfig::default(),
            retrieval: RetrievalConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        if self.neighbors.k == 0 {
            return Err(CliError::Config("neighbors.k must be at least 1".into()));
        }
        if self.retrieval.ks.is_empty() || self.retrieval.ks.contains(&0) {
            return Err(CliError::Config("retrieval.ks must be non-empty positive integers".into()));
        }
        if self.perturb.strategies.is_empty() {
            return Err(CliError::Config("perturb.strategies must not be empty".into()));
        }
        let mut train = self.train.clone();
        train.seed = self.seed;
        train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
