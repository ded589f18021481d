use std::collections::HashSet;

use alora_serve::kv_cache::chain_digests;
use alora_serve::{compute_block_keys, hash_block, BlockDigest, BlockPool, TokenId};

const MAX_LEN: usize = 32;

fn base_seq(len: usize) -> Vec<TokenId> {
    (0..len as u32).map(|i| (i * 7 + 3) % 11).collect()
}

fn digests(tokens: &[TokenId], b: usize, adapter: Option<&str>, inv: Option<usize>) -> Vec<BlockDigest> {
    let keys = compute_block_keys(tokens.len(), b, adapter, inv);
    chain_digests(tokens, &keys, b)
}

fn shared_prefix(a: &[BlockDigest], b: &[BlockDigest]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

#[test]
fn one_digest_per_full_block() {
    for b in 1..=4 {
        for len in 0..=MAX_LEN {
            assert_eq!(digests(&base_seq(len), b, None, None).len(), len / b);
        }
    }
}

#[test]
fn chain_equals_blockwise_hashing() {
    for b in 1..=4 {
        let seq = base_seq(MAX_LEN);
        let mut parent = None;
        for (i, d) in digests(&seq, b, None, None).into_iter().enumerate() {
            let expected = hash_block(parent, &seq[i * b..(i + 1) * b], "", b).unwrap();
            assert_eq!(d, expected);
            parent = Some(d);
        }
    }
}

#[test]
fn shared_prefix_counts_and_divergence() {
    for b in 1..=4 {
        for len in 1..=MAX_LEN {
            let seq = base_seq(len);
            let reference = digests(&seq, b, None, None);
            for p in 0..len {
                let mut other = seq.clone();
                other[p] += 100;
                let d = digests(&other, b, None, None);
                let shared = shared_prefix(&reference, &d);
                assert_eq!(shared, (p / b).min(len / b), "b={b} len={len} p={p}");
                for i in shared..d.len() {
                    assert_ne!(reference[i], d[i], "divergence must propagate: b={b} len={len} p={p} i={i}");
                }
            }
        }
    }
}

#[test]
fn standard_adapter_shares_nothing_with_base() {
    for b in 1..=4 {
        for len in 0..=MAX_LEN {
            let seq = base_seq(len);
            let base: HashSet<_> = digests(&seq, b, None, None).into_iter().collect();
            let lora: HashSet<_> = digests(&seq, b, Some("lora"), None).into_iter().collect();
            let other: HashSet<_> = digests(&seq, b, Some("lora2"), None).into_iter().collect();
            assert!(base.is_disjoint(&lora));
            assert!(lora.is_disjoint(&other));
        }
    }
}

#[test]
fn activated_adapter_shares_exactly_the_pre_invocation_blocks() {
    for b in 1..=4 {
        for len in 0..=MAX_LEN {
            let seq = base_seq(len);
            let base = digests(&seq, b, None, None);
            for inv in 0..=len {
                let act = digests(&seq, b, Some("alora"), Some(inv));
                let shared = shared_prefix(&base, &act);
                assert_eq!(shared, inv / b, "b={b} len={len} inv={inv}");
                assert!(act[shared..].iter().all(|d| !base.contains(d)));
                let other = digests(&seq, b, Some("alora2"), Some(inv));
                assert_eq!(shared_prefix(&act, &other), inv / b);
            }
        }
    }
}

#[test]
fn partial_tail_is_never_cached() {
    for b in 1..=4 {
        for len in 0..=MAX_LEN {
            let seq = base_seq(len);
            let mut pool = BlockPool::new(MAX_LEN + 1, b, 1, 2);
            let mut table = alora_serve::BlockTable::default();
            let ids = pool.allocate(len.div_ceil(b)).unwrap();
            table.push_fresh(&ids);
            for p in 0..len {
                pool.write_kv(ids[p / b], 0, p % b, &[0.0; 2], &[0.0; 2]);
            }
            let keys = compute_block_keys(len, b, None, None);
            pool.commit_and_free(&mut table, &seq, &keys);
            assert_eq!(pool.cached_count(), len / b);

            let mut longer = seq.clone();
            longer.extend([1, 2, 3, 4, 5]);
            let keys = compute_block_keys(longer.len(), b, None, None);
            let hit = pool.find_cached_prefix(&longer, &keys);
            assert_eq!(hit.hit_tokens, len / b * b);
            pool.release(&hit.blocks);
            pool.check_invariants().unwrap();
        }
    }
}

#[test]
fn no_collisions_over_small_binary_sequences() {
    for b in 1..=4 {
        let mut seen = HashSet::new();
        for len in (b..=12).step_by(b) {
            for bits in 0u32..(1 << len) {
                let seq: Vec<TokenId> = (0..len).map(|i| (bits >> i) & 1).collect();
                let d = *digests(&seq, b, None, None).last().unwrap();
                assert!(seen.insert(d), "collision for b={b} len={len} bits={bits:b}");
            }
        }
    }
}

#[test]
fn identical_blocks_at_different_depths_differ() {
    let seq = vec![5; 16];
    for b in 1..=4 {
        let d = digests(&seq, b, None, None);
        let unique: HashSet<_> = d.iter().collect();
        assert_eq!(unique.len(), d.len());
    }
}
