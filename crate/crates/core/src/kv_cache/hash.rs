use std::fmt;

use serde::{Serialize, Serializer};
use xxhash_rust::xxh3::Xxh3;

use super::CacheError;
use crate::TokenId;

/// 128-bit chained block digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockDigest(pub u128);

impl fmt::Display for BlockDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for BlockDigest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

const TAG_BLOCK: &[u8] = b"alora.kv.block.v1";
const TAG_PARENT: u8 = 0x01;
const TAG_ROOT: u8 = 0x00;
const TAG_TOKENS: u8 = 0x02;
const TAG_KEY: u8 = 0x03;

/// Digest of one full block. `tokens.len()` must equal `block_size`.
pub fn hash_block(
    parent: Option<BlockDigest>,
    tokens: &[TokenId],
    extra_key: &str,
    block_size: usize,
) -> Result<BlockDigest, CacheError> {
    if tokens.len() != block_size {
        return Err(CacheError::BlockLength {
            expected: block_size,
            got: tokens.len(),
        });
    }
    Ok(digest_unchecked(parent, tokens, extra_key))
}

fn digest_unchecked(parent: Option<BlockDigest>, tokens: &[TokenId], extra_key: &str) -> BlockDigest {
    let mut h = Xxh3::new();
    h.update(TAG_BLOCK);
    match parent {
        Some(p) => {
            h.update(&[TAG_PARENT]);
            h.update(&p.0.to_le_bytes());
        }
        None => h.update(&[TAG_ROOT]),
    }
    h.update(&[TAG_TOKENS]);
    h.update(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        h.update(&t.to_le_bytes());
    }
    h.update(&[TAG_KEY]);
    h.update(&(extra_key.len() as u64).to_le_bytes());
    h.update(extra_key.as_bytes());
    BlockDigest(h.digest128())
}

/// Extra key for block `index`.
///
/// No adapter: empty. Standard adapter (`inv_start` absent): the adapter id on
/// every block. Activated adapter: empty for blocks that end at or before
/// `inv_start`, the adapter id for the block straddling it and everything after.
pub fn block_key(
    index: usize,
    block_size: usize,
    adapter_id: Option<&str>,
    inv_start: Option<usize>,
) -> String {
    match (adapter_id, inv_start) {
        (None, _) => String::new(),
        (Some(id), None) => id.to_string(),
        (Some(id), Some(inv)) => {
            if (index + 1) * block_size <= inv {
                String::new()
            } else {
                id.to_string()
            }
        }
    }
}

/// Extra keys for every full block of a `n_tokens`-long sequence.
pub fn compute_block_keys(
    n_tokens: usize,
    block_size: usize,
    adapter_id: Option<&str>,
    inv_start: Option<usize>,
) -> Vec<String> {
    debug_assert!(inv_start.is_none() || adapter_id.is_some());
    (0..n_tokens / block_size)
        .map(|i| block_key(i, block_size, adapter_id, inv_start))
        .collect()
}

/// Chained digests for the leading full blocks of `tokens`, one per key.
pub fn chain_digests(tokens: &[TokenId], keys: &[String], block_size: usize) -> Vec<BlockDigest> {
    let n = (tokens.len() / block_size).min(keys.len());
    let mut parent = None;
    (0..n)
        .map(|i| {
            let d = digest_unchecked(parent, &tokens[i * block_size..(i + 1) * block_size], &keys[i]);
            parent = Some(d);
            d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_deterministic_and_keyed() {
        let a = hash_block(None, &[1, 2, 3], "", 3).unwrap();
        assert_eq!(a, hash_block(None, &[1, 2, 3], "", 3).unwrap());
        assert_ne!(a, hash_block(None, &[1, 2, 3], "adapterA", 3).unwrap());
        assert_ne!(a, hash_block(Some(a), &[1, 2, 3], "", 3).unwrap());
        assert_eq!(a.to_string().len(), 32);
    }

    #[test]
    fn wrong_length_is_usage_error() {
        assert_eq!(
            hash_block(None, &[1, 2], "", 3),
            Err(CacheError::BlockLength { expected: 3, got: 2 })
        );
    }

    #[test]
    fn fig3_style_keys() {
        // Activation tokens come after the 9 context tokens.
        assert_eq!(compute_block_keys(9, 3, Some("uq"), Some(9)), vec!["", "", ""]);
        assert_eq!(compute_block_keys(9, 3, Some("uq"), None), vec!["uq", "uq", "uq"]);
        assert_eq!(compute_block_keys(9, 3, None, None), vec!["", "", ""]);
        assert_eq!(compute_block_keys(12, 4, Some("id"), Some(6)), vec!["", "id", "id"]);
        assert_eq!(compute_block_keys(10, 4, None, None).len(), 2);
    }

    #[test]
    fn key_boundary_matches_span_brute_force() {
        for b in 1..=5 {
            for inv in 0..=20 {
                let keys = compute_block_keys(20, b, Some("x"), Some(inv));
                for (i, key) in keys.iter().enumerate() {
                    let span_before = (i * b..(i + 1) * b).all(|p| p < inv);
                    assert_eq!(key.is_empty(), span_before, "b={b} inv={inv} block={i}");
                }
            }
        }
    }

    #[test]
    fn chain_stops_at_partial_block() {
        let toks: Vec<TokenId> = (0..10).collect();
        let keys = compute_block_keys(10, 4, None, None);
        let chain = chain_digests(&toks, &keys, 4);
        assert_eq!(chain.len(), 2);
        assert_eq!(chain[1], hash_block(Some(chain[0]), &toks[4..8], "", 4).unwrap());
    }
}
