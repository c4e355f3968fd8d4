//! The run configuration file: one TOML table per pipeline stage.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use ubr_core::network::NetworkConfig;
use ubr_core::phantom::{AnomalyClass, PhantomSpec};
use ubr_core::sampler::SamplerConfig;
use ubr_core::trainer::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "run-config.toml";

/// Dataset-level knobs of `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub volumes: usize,
    pub anomaly_fraction: f64,
    pub anomaly_kinds: Vec<AnomalyClass>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            volumes: 60,
            anomaly_fraction: 0.0,
            anomaly_kinds: AnomalyClass::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every per-module seed is set from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub phantom: PhantomSpec,
    pub sampler: SamplerConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Propagates the master seed into every section.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.sampler.seed = seed;
        self.network.seed = seed;
        self.train.seed = seed;
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sampler: self.sampler.clone(),
            network: self.network.clone(),
            ..self.train.clone()
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serialising the resolved config")?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
