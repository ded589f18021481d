//! Multi-adapter LLM serving engine with cross-model KV-cache prefix reuse.
//!
//! A small decoder-only transformer runs over a paged KV cache. Full blocks are
//! addressed by a chained content hash, and activated adapters hash their
//! pre-invocation blocks exactly like the base model does, so base and adapter
//! requests share cached prefixes in both directions.
//!
//! Layout:
//! - [`model`]: weights, low-rank adapters, masked QKV projection, paged attention.
//! - [`kv_cache`]: block pool, block hashing, prefix lookup, LRU eviction.
//! - [`scheduler`]: continuous batching with chunked prefill and stage timestamps.
//! - [`engine`]: request lifecycle, invocation detection, activation masks.
//! - [`metrics`]: per-request stage metrics, aggregates, CSV/JSON export.

pub mod engine;
pub mod exec;
pub mod kv_cache;
pub mod metrics;
pub mod model;
pub mod scheduler;
pub mod tensor;

/// Vocabulary index of a token.
pub type TokenId = u32;

pub use engine::{
    build_alora_metadata, detect_invocation, AloraMetadata, ComparisonMode, CompletedRequest,
    Engine, EngineConfig, EngineError, EngineHandle, FailedRequest, MaskSpan, RequestSpec,
    RunOutcome, StepReport,
};
pub use exec::Exec;
pub use kv_cache::{
    compute_block_keys, hash_block, BlockDigest, BlockId, BlockPool, BlockTable, CacheError,
    CachedPrefix,
};
pub use metrics::{
    finalize, AggregateMetrics, Clock, ExportFormat, FailureRecord, MetricsError, MetricsTable,
    RequestMetrics, Summary, VirtualClock, VirtualCost, WallClock,
};
pub use model::{
    generate_weights, greedy_next_token, paged_attention, project_qkv_masked, ActivationMask,
    AdapterDefinition, AdapterMode, BaseWeights, ForwardContext, LoraAdapter, ModelConfig,
    ModelError, Projection, SeqItem, Transformer,
};
pub use scheduler::{
    AdapterBinding, Request, RequestId, RequestState, RequestTag, Scheduler, SchedulerConfig,
    SchedulerError, SpanKind, StepPlan, StepTrace,
};
