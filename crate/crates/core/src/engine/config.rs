use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::metrics::VirtualCost;
use crate::model::{AdapterDefinition, ModelConfig};
use crate::scheduler::SchedulerConfig;

/// How registered activated adapters are executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonMode {
    /// Activated adapters run as defined.
    #[default]
    Alora,
    /// Every adapter runs as a standard LoRA on all tokens.
    Lora,
}

impl ComparisonMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ComparisonMode::Alora => "alora",
            ComparisonMode::Lora => "lora",
        }
    }
}

fn default_block_size() -> usize {
    4
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    pub pool_blocks: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default)]
    pub adapters: Vec<AdapterDefinition>,
    #[serde(default)]
    pub comparison_mode: ComparisonMode,
    #[serde(default = "enabled")]
    pub prefix_caching: bool,
    /// Keep the logits behind every generated token.
    #[serde(default)]
    pub record_logits: bool,
    #[serde(default)]
    pub virtual_cost: VirtualCost,
}

impl EngineConfig {
    pub fn new(model: ModelConfig, pool_blocks: usize) -> Self {
        Self {
            model,
            scheduler: SchedulerConfig::default(),
            pool_blocks,
            block_size: default_block_size(),
            adapters: Vec::new(),
            comparison_mode: ComparisonMode::default(),
            prefix_caching: true,
            record_logits: false,
            virtual_cost: VirtualCost::default(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self, EngineError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, EngineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.model.validate()?;
        self.scheduler.validate()?;
        if self.block_size == 0 {
            return Err(EngineError::InvalidConfig("block_size must be at least 1".into()));
        }
        if self.pool_blocks == 0 {
            return Err(EngineError::InvalidConfig("pool_blocks must be at least 1".into()));
        }
        let mut ids: Vec<&str> = self.adapters.iter().map(|a| a.adapter_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(EngineError::InvalidConfig(format!("adapter `{}` registered twice", w[0])));
        }
        if ids.contains(&"") {
            return Err(EngineError::InvalidConfig("adapter id must be non-empty".into()));
        }
        Ok(())
    }
}
