use std::sync::Arc;

use alora_serve::{
    AdapterDefinition, Clock, ComparisonMode, Engine, EngineConfig, Exec, ModelConfig, Projection,
    SchedulerConfig, TokenId, Transformer, VirtualClock, VirtualCost, WallClock,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::BenchError;

pub const ALORA_RANK: usize = 32;
pub const LORA_RANK: usize = 8;
pub const INVOCATION_LEN: usize = 3;

/// Engine knobs shared by every run of a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineSettings {
    pub model: ModelConfig,
    pub scheduler: SchedulerConfig,
    pub block_size: usize,
    /// Fixed pool size; `None` sizes the pool from the batch rule.
    pub pool_blocks: Option<usize>,
    pub prefix_caching: bool,
    pub virtual_clock: bool,
    pub virtual_cost: VirtualCost,
    pub exec: Exec,
    /// Keep per-token logits on completed requests.
    pub record_logits: bool,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            scheduler: SchedulerConfig::default(),
            block_size: 4,
            pool_blocks: None,
            prefix_caching: true,
            virtual_clock: false,
            virtual_cost: VirtualCost::default(),
            exec: Exec::default(),
            record_logits: false,
        }
    }
}

impl EngineSettings {
    pub fn from_engine_config(cfg: &EngineConfig) -> Self {
        Self {
            model: cfg.model.clone(),
            scheduler: cfg.scheduler,
            block_size: cfg.block_size,
            pool_blocks: Some(cfg.pool_blocks),
            prefix_caching: cfg.prefix_caching,
            virtual_cost: cfg.virtual_cost,
            ..Self::default()
        }
    }

    /// The trailing reserved tokens of the vocabulary.
    pub fn invocation_tokens(&self) -> Vec<TokenId> {
        let v = self.model.vocab_size as TokenId;
        (v - INVOCATION_LEN as TokenId..v).collect()
    }

    pub fn model(&self) -> Result<Arc<Transformer>, BenchError> {
        let model = Transformer::from_config(&self.model)
            .map_err(|e| BenchError::InvalidSpec(e.to_string()))?
            .with_exec(self.exec);
        Ok(Arc::new(model))
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        if self.virtual_clock {
            Arc::new(VirtualClock::new())
        } else {
            Arc::new(WallClock::new())
        }
    }

    /// Pool holding `instances` conversations whose longest request spans
    /// `max_seq_len` tokens, with two spare blocks each for partial tails.
    pub fn pool_for(&self, instances: usize, max_seq_len: usize) -> usize {
        instances * (max_seq_len.div_ceil(self.block_size) + 2)
    }

    /// How many conversations of `max_seq_len` tokens the pool holds.
    pub fn batch_for(&self, pool_blocks: usize, max_seq_len: usize) -> usize {
        pool_blocks * self.block_size / max_seq_len.max(1)
    }

    pub fn adapters(&self, n: usize, mode: ComparisonMode) -> Vec<AdapterDefinition> {
        let rank = match mode {
            ComparisonMode::Alora => ALORA_RANK,
            ComparisonMode::Lora => LORA_RANK,
        };
        (0..n)
            .map(|i| AdapterDefinition {
                adapter_id: adapter_id(i),
                rank: rank.min(self.model.d_model / 2),
                seed: 1000 + i as u64,
                targets: Projection::ALL.to_vec(),
                invocation_tokens: Some(self.invocation_tokens()),
            })
            .collect()
    }

    pub fn engine_config(&self, pool_blocks: usize, n_adapters: usize, mode: ComparisonMode) -> EngineConfig {
        let mut cfg = EngineConfig::new(self.model.clone(), pool_blocks);
        cfg.scheduler = self.scheduler;
        cfg.block_size = self.block_size;
        cfg.adapters = self.adapters(n_adapters, mode);
        cfg.comparison_mode = mode;
        cfg.prefix_caching = self.prefix_caching;
        cfg.virtual_cost = self.virtual_cost;
        cfg.record_logits = self.record_logits;
        cfg
    }

    pub fn engine(
        &self,
        model: Arc<Transformer>,
        pool_blocks: usize,
        n_adapters: usize,
        mode: ComparisonMode,
    ) -> Result<Engine, BenchError> {
        Engine::with_model(self.engine_config(pool_blocks, n_adapters, mode), model, self.clock())
            .map_err(BenchError::engine("building engine"))
    }
}

pub fn adapter_id(i: usize) -> String {
    format!("adapter{i}")
}

/// Uniform token ids below the reserved invocation tokens.
pub fn random_prompt(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    let hi = (vocab - INVOCATION_LEN) as TokenId;
    (0..len).map(|_| rng.random_range(0..hi)).collect()
}
