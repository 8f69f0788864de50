//! Run configuration: one TOML file with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::GeneratorSpec;
use crate::curriculum::RcsConfig;
use crate::error::{Error, Result};
use crate::grpo::{GrpoConfig, SftConfig, WarmupConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Intent removed from training and reported separately.
    pub exclude: Option<String>,
}

/// Everything a pipeline run needs. `seed` and `threads` apply to every
/// stochastic stage; the corpus keeps its own `generator.rng_seed` so that
/// training seeds can vary over fixed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    /// Output directory; `--out` overrides it.
    pub out: String,
    pub generator: GeneratorSpec,
    pub warmup: WarmupConfig,
    pub grpo: GrpoConfig,
    pub sft: SftConfig,
    pub rcs: RcsConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: "runs/default".to_string(),
            generator: GeneratorSpec::default(),
            warmup: WarmupConfig::default(),
            grpo: GrpoConfig::default(),
            sft: SftConfig::default(),
            rcs: RcsConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation("config", e.to_string()))
    }

    /// Pushes the run-wide seed and thread count into every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.grpo.seed = self.seed;
        self.grpo.threads = self.threads;
        self.sft.seed = self.seed;
        self.warmup.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::validation("threads", "must be at least 1"));
        }
        self.generator.validate()?;
        self.warmup.validate()?;
        self.grpo.validate()?;
        self.rcs.validate()?;
        if self.sft.batch_size == 0 {
            return Err(Error::validation("sft.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}
