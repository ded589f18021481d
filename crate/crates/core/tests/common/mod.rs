#![allow(dead_code)]

use std::sync::Arc;

use alora_serve::{
    AdapterDefinition, ComparisonMode, Engine, EngineConfig, ModelConfig, Projection, TokenId,
    VirtualClock,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INVOCATION: [TokenId; 3] = [61, 62, 63];

pub fn small_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        head_dim: 8,
        d_model: 16,
        vocab_size: 64,
        max_seq_len: 1024,
        rng_seed: 5,
    }
}

pub fn adapter(id: &str, seed: u64, activated: bool) -> AdapterDefinition {
    AdapterDefinition {
        adapter_id: id.into(),
        rank: 4,
        seed,
        targets: Projection::ALL.to_vec(),
        invocation_tokens: activated.then(|| INVOCATION.to_vec()),
    }
}

pub fn config(block_size: usize, pool_blocks: usize, budget: usize) -> EngineConfig {
    let mut cfg = EngineConfig::new(small_model(), pool_blocks);
    cfg.block_size = block_size;
    cfg.scheduler.token_budget = budget;
    cfg.adapters = vec![adapter("alora", 7, true)];
    cfg
}

pub fn virtual_engine(cfg: EngineConfig) -> Engine {
    Engine::new(cfg, Arc::new(VirtualClock::new())).unwrap()
}

pub fn lora_config(mut cfg: EngineConfig) -> EngineConfig {
    cfg.comparison_mode = ComparisonMode::Lora;
    cfg
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tokens that never contain the invocation tokens.
pub fn random_prompt(rng: &mut ChaCha8Rng, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(0..INVOCATION[0])).collect()
}

pub fn with_invocation(mut prompt: Vec<TokenId>) -> Vec<TokenId> {
    prompt.extend_from_slice(&INVOCATION);
    prompt
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
