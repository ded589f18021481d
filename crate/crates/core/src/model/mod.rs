//! Decoder-only transformer with paged KV reads and activation-aware adapters.

mod attention;
mod config;
mod forward;
mod lora;
mod mask;
mod projection;
mod weights;

pub use attention::paged_attention;
pub use config::ModelConfig;
pub use forward::{greedy_next_token, ForwardContext, ForwardOutput, KvEntry, SeqItem, Transformer};
pub use lora::{AdapterDefinition, AdapterMode, LoraAdapter, LowRankDelta, Projection};
pub use mask::ActivationMask;
pub use projection::{project_qkv_masked, Qkv};
pub use weights::{generate_weights, BaseWeights, LayerWeights};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("adapter `{adapter}`: {detail}")]
    AdapterConfig { adapter: String, detail: String },
    #[error("activation mask has {got} entries, expected {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("request needs {needed} blocks for its span but only {have} are allocated")]
    InsufficientBlocks { needed: usize, have: usize },
    #[error("position {position} exceeds max_seq_len {max}")]
    SequenceTooLong { position: usize, max: usize },
    #[error("kv cache consistency: {0}")]
    Consistency(String),
}
