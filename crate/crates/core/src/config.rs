//! Run configuration, loaded from TOML. Every field feeds the config hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cf::CfConfig;
use crate::eval::EvalMode;
use crate::hashing::{derive_seed, sha256_hex};
use crate::llm::LlmBackendConfig;
use crate::memory::{RefineLevel, DEFAULT_N_DEMOS, DEFAULT_ROUNDS, DEFAULT_TAU, DEFAULT_THRESHOLD};
use crate::metrics::MetricKind;
use crate::reflection::DEFAULT_MAX_HISTORY;
use crate::selector::PpoConfig;
use crate::synthetic::SyntheticConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub catalog: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    /// Used when no files are given.
    pub synthetic: SyntheticConfig,
    pub max_history: usize,
    pub pool_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            catalog: None,
            interactions: None,
            synthetic: SyntheticConfig::default(),
            max_history: DEFAULT_MAX_HISTORY,
            pool_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub threshold: f64,
    pub tau: f64,
    pub n_demos: usize,
    pub rounds: u32,
    pub level: RefineLevel,
    pub metric: MetricKind,
    pub capacity: Option<usize>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            tau: DEFAULT_TAU,
            n_demos: DEFAULT_N_DEMOS,
            rounds: DEFAULT_ROUNDS,
            level: RefineLevel::Group,
            metric: MetricKind::Ndcg(10),
            capacity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<EvalMode>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: EvalMode::standard(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// `seed` inside is ignored; the CF seed derives from the master seed.
    pub cf: CfConfig,
    pub cluster: ClusterConfig,
    pub llm: LlmBackendConfig,
    pub memory: MemoryConfig,
    /// `seed` inside is ignored; the bandit seed derives from the master seed.
    pub bandit: PpoConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Toml {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Per-component seed derived from the master seed.
    pub fn seed_for(&self, component: &str) -> u64 {
        derive_seed(self.seed, &[component])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.data.catalog.is_some() != self.data.interactions.is_some() {
            return bad("data.catalog and data.interactions must be given together".into());
        }
        if self.data.pool_size < 2 {
            return bad("data.pool_size must be at least 2".into());
        }
        if self.cluster.k == 0 {
            return bad("cluster.k must be positive".into());
        }
        if self.memory.tau.is_nan() || self.memory.tau <= 0.0 {
            return bad("memory.tau must be positive".into());
        }
        if self.memory.n_demos == 0 {
            return bad("memory.n_demos must be positive".into());
        }
        self.llm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.bandit.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
