//! Paged KV storage with chained block hashing for automatic prefix caching.
//!
//! A block's digest covers its tokens, its parent's digest and an extra key.
//! The extra key is empty for base-model blocks and for activated-adapter
//! blocks that lie entirely before the invocation point, which is what lets
//! base and activated-adapter requests hit each other's blocks.

mod hash;
mod pool;

pub use hash::{block_key, chain_digests, compute_block_keys, hash_block, BlockDigest};
pub use pool::{BlockId, BlockInfo, BlockPool, BlockTable, CachedPrefix};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("block pool exhausted: requested {requested} blocks, {free} free")]
    Exhausted { requested: usize, free: usize },
    #[error("block hash needs exactly {expected} tokens, got {got}")]
    BlockLength { expected: usize, got: usize },
    #[error("kv cache consistency: {0}")]
    Consistency(String),
}
