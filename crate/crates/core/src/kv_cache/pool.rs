use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};

use serde::Serialize;

use super::hash::{chain_digests, BlockDigest};
use super::CacheError;
use crate::TokenId;

/// Physical block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct BlockId(pub usize);

#[derive(Debug, Clone, Default)]
struct BlockMeta {
    ref_count: u32,
    fill: usize,
    hash: Option<BlockDigest>,
    /// Position in the free list; `None` while pinned.
    free_stamp: Option<u64>,
}

/// Snapshot of one block's bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockInfo {
    pub block_id: BlockId,
    pub fill: usize,
    pub digest: Option<BlockDigest>,
    pub ref_count: u32,
    pub state: &'static str,
}

/// A request's logical-to-physical block mapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockTable {
    blocks: Vec<BlockId>,
    reused: Vec<bool>,
}

impl BlockTable {
    pub fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    /// `true` for blocks that came from a cache hit.
    pub fn reused(&self) -> &[bool] {
        &self.reused
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn push_hits(&mut self, ids: &[BlockId]) {
        self.blocks.extend_from_slice(ids);
        self.reused.extend(std::iter::repeat_n(true, ids.len()));
    }

    pub fn push_fresh(&mut self, ids: &[BlockId]) {
        self.blocks.extend_from_slice(ids);
        self.reused.extend(std::iter::repeat_n(false, ids.len()));
    }

    pub fn take(&mut self) -> Vec<BlockId> {
        self.reused.clear();
        std::mem::take(&mut self.blocks)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CachedPrefix {
    pub blocks: Vec<BlockId>,
    pub hit_tokens: usize,
}

/// Fixed pool of KV blocks with a hash index over committed full blocks.
///
/// Free blocks stay addressable through the index until they are handed out
/// again; the free list is ordered by release time and evicts the oldest first.
#[derive(Debug)]
pub struct BlockPool {
    block_size: usize,
    n_layers: usize,
    d_model: usize,
    meta: Vec<BlockMeta>,
    free: BTreeMap<u64, BlockId>,
    next_stamp: u64,
    index: HashMap<BlockDigest, BlockId>,
    total_blocks: usize,
    /// Layer-major: `[layer][block][slot][d_model]`.
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl BlockPool {
    pub fn new(total_blocks: usize, block_size: usize, n_layers: usize, d_model: usize) -> Self {
        assert!(block_size >= 1, "block_size must be at least 1");
        let storage = total_blocks * n_layers * block_size * d_model;
        let mut pool = Self {
            block_size,
            n_layers,
            d_model,
            meta: vec![BlockMeta::default(); total_blocks],
            free: BTreeMap::new(),
            next_stamp: 0,
            index: HashMap::new(),
            total_blocks,
            keys: vec![0.0; storage],
            values: vec![0.0; storage],
        };
        for id in 0..total_blocks {
            pool.push_free(BlockId(id));
        }
        pool
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn total_blocks(&self) -> usize {
        self.meta.len()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_count(&self) -> usize {
        self.meta.iter().filter(|m| m.ref_count > 0).count()
    }

    pub fn cached_count(&self) -> usize {
        self.index.len()
    }

    pub fn lookup(&self, digest: BlockDigest) -> Option<BlockId> {
        self.index.get(&digest).copied()
    }

    fn push_free(&mut self, id: BlockId) {
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        self.meta[id.0].free_stamp = Some(stamp);
        self.free.insert(stamp, id);
    }

    fn pin(&mut self, id: BlockId) {
        let meta = &mut self.meta[id.0];
        if let Some(stamp) = meta.free_stamp.take() {
            self.free.remove(&stamp);
        }
        meta.ref_count += 1;
    }

    /// Takes `n` blocks from the head of the free list, dropping any hash
    /// index entries they carried. All-or-nothing.
    pub fn allocate(&mut self, n: usize) -> Result<Vec<BlockId>, CacheError> {
        if n > self.free.len() {
            return Err(CacheError::Exhausted {
                requested: n,
                free: self.free.len(),
            });
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (_, id) = self.free.pop_first().expect("free list length checked");
            let meta = &mut self.meta[id.0];
            if let Some(digest) = meta.hash.take() {
                if self.index.get(&digest) == Some(&id) {
                    self.index.remove(&digest);
                }
            }
            meta.free_stamp = None;
            meta.fill = 0;
            meta.ref_count = 1;
            out.push(id);
        }
        Ok(out)
    }

    /// Longest run of leading full blocks whose chained digests are indexed.
    /// Every hit block is pinned (and leaves the free list if it was there).
    pub fn find_cached_prefix(&mut self, tokens: &[TokenId], keys: &[String]) -> CachedPrefix {
        let mut blocks = Vec::new();
        for digest in chain_digests(tokens, keys, self.block_size) {
            match self.index.get(&digest) {
                Some(&id) => blocks.push(id),
                None => break,
            }
        }
        for &id in &blocks {
            self.pin(id);
        }
        CachedPrefix {
            hit_tokens: blocks.len() * self.block_size,
            blocks,
        }
    }

    /// Unpins blocks, tail first, so that earlier (more shareable) blocks are
    /// released later and evicted later.
    pub fn release(&mut self, blocks: &[BlockId]) {
        for &id in blocks.iter().rev() {
            let meta = &mut self.meta[id.0];
            debug_assert!(meta.ref_count > 0, "releasing unpinned block {id:?}");
            meta.ref_count = meta.ref_count.saturating_sub(1);
            if meta.ref_count == 0 {
                self.push_free(id);
            }
        }
    }

    /// Hashes every full block covered by `computed` tokens, indexes it, then
    /// releases the whole table. A partial tail block is released unhashed.
    pub fn commit_and_free(&mut self, table: &mut BlockTable, computed: &[TokenId], keys: &[String]) {
        let digests = chain_digests(computed, keys, self.block_size);
        for (i, digest) in digests.into_iter().enumerate() {
            let Some(&id) = table.blocks().get(i) else {
                break;
            };
            let meta = &mut self.meta[id.0];
            if meta.fill != self.block_size {
                log::warn!("block {id:?} committed with fill {}; skipping hash", meta.fill);
                continue;
            }
            meta.hash = Some(digest);
            self.index.insert(digest, id);
        }
        let blocks = table.take();
        self.release(&blocks);
    }

    /// Releases a table without indexing anything.
    pub fn free_table(&mut self, table: &mut BlockTable) {
        let blocks = table.take();
        self.release(&blocks);
    }

    pub fn info(&self, id: BlockId) -> BlockInfo {
        let m = &self.meta[id.0];
        BlockInfo {
            block_id: id,
            fill: m.fill,
            digest: m.hash,
            ref_count: m.ref_count,
            state: if m.ref_count > 0 { "pinned" } else { "free" },
        }
    }

    /// Oldest-released block first.
    pub fn free_order(&self) -> Vec<BlockId> {
        self.free.values().copied().collect()
    }

    /// One JSON object per block: id, fill, digest hex, pin state.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for id in 0..self.meta.len() {
            serde_json::to_writer(&mut out, &self.info(BlockId(id)))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let allocated = self.allocated_count();
        if allocated + self.free.len() != self.meta.len() {
            return Err(format!(
                "allocated {allocated} + free {} != total {}",
                self.free.len(),
                self.meta.len()
            ));
        }
        for (id, m) in self.meta.iter().enumerate() {
            if (m.ref_count > 0) == m.free_stamp.is_some() {
                return Err(format!("block {id} pinned/free state inconsistent"));
            }
            if m.fill > self.block_size {
                return Err(format!("block {id} overfilled"));
            }
            if m.hash.is_some() && m.fill != self.block_size {
                return Err(format!("block {id} hashed while partial"));
            }
        }
        for (digest, id) in &self.index {
            let m = &self.meta[id.0];
            if m.hash != Some(*digest) || m.fill != self.block_size {
                return Err(format!("index entry {digest} -> {id:?} is stale"));
            }
        }
        Ok(())
    }

    // --- KV storage -------------------------------------------------------

    fn offset(&self, id: BlockId, layer: usize, slot: usize) -> usize {
        ((layer * self.total_blocks + id.0) * self.block_size + slot) * self.d_model
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Checks that `table` can serve reads of positions `0..upto`.
    pub fn ensure_readable(&self, table: &[BlockId], upto: usize) -> Result<(), CacheError> {
        let needed = upto.div_ceil(self.block_size);
        if table.len() < needed {
            return Err(CacheError::Consistency(format!(
                "block table has {} blocks, reads need {needed}",
                table.len()
            )));
        }
        for (i, id) in table.iter().take(needed).enumerate() {
            let m = self
                .meta
                .get(id.0)
                .ok_or_else(|| CacheError::Consistency(format!("unknown block {id:?}")))?;
            if m.ref_count == 0 {
                return Err(CacheError::Consistency(format!(
                    "block {id:?} is not pinned by any request"
                )));
            }
            let wanted = (upto - i * self.block_size).min(self.block_size);
            if m.fill < wanted {
                return Err(CacheError::Consistency(format!(
                    "block {id:?} holds {} tokens, reads need {wanted}",
                    m.fill
                )));
            }
        }
        Ok(())
    }

    pub fn key(&self, id: BlockId, layer: usize, slot: usize) -> &[f32] {
        let o = self.offset(id, layer, slot);
        &self.keys[o..o + self.d_model]
    }

    pub fn value(&self, id: BlockId, layer: usize, slot: usize) -> &[f32] {
        let o = self.offset(id, layer, slot);
        &self.values[o..o + self.d_model]
    }

    pub fn write_kv(&mut self, id: BlockId, layer: usize, slot: usize, key: &[f32], value: &[f32]) {
        debug_assert!(self.meta[id.0].ref_count > 0, "write into unpinned block");
        debug_assert!(self.meta[id.0].hash.is_none(), "write into hashed block");
        let o = self.offset(id, layer, slot);
        self.keys[o..o + self.d_model].copy_from_slice(key);
        self.values[o..o + self.d_model].copy_from_slice(value);
        let meta = &mut self.meta[id.0];
        meta.fill = meta.fill.max(slot + 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_cache::compute_block_keys;

    fn fill_blocks(pool: &mut BlockPool, ids: &[BlockId], tokens: usize) {
        let b = pool.block_size();
        let d = pool.d_model();
        for pos in 0..tokens {
            let id = ids[pos / b];
            for layer in 0..pool.n_layers() {
                pool.write_kv(id, layer, pos % b, &vec![pos as f32; d], &vec![-(pos as f32); d]);
            }
        }
    }

    fn run_request(pool: &mut BlockPool, tokens: &[TokenId], keys: &[String]) -> usize {
        let b = pool.block_size();
        let hits = pool.find_cached_prefix(&tokens[..tokens.len() - 1], keys);
        let mut table = BlockTable::default();
        table.push_hits(&hits.blocks);
        let fresh = pool.allocate(tokens.len().div_ceil(b) - hits.blocks.len()).unwrap();
        table.push_fresh(&fresh);
        // The fresh blocks hold the positions after the hit prefix.
        for pos in hits.hit_tokens..tokens.len() {
            let id = table.blocks()[pos / b];
            pool.write_kv(id, 0, pos % b, &[0.0; 2], &[0.0; 2]);
        }
        pool.commit_and_free(&mut table, tokens, keys);
        hits.hit_tokens
    }

    #[test]
    fn fresh_pool_allocation() {
        let mut pool = BlockPool::new(16, 4, 1, 2);
        let ids = pool.allocate(4).unwrap();
        assert_eq!(ids.len(), 4);
        let mut sorted = ids.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert_eq!(pool.free_count(), 12);
        assert_eq!(pool.allocated_count(), 4);
        pool.check_invariants().unwrap();
    }

    #[test]
    fn over_allocation_fails_cleanly() {
        let mut pool = BlockPool::new(16, 4, 1, 2);
        assert_eq!(
            pool.allocate(17),
            Err(CacheError::Exhausted { requested: 17, free: 16 })
        );
        assert_eq!(pool.free_count(), 16);
    }

    #[test]
    fn cold_cache_has_no_hits() {
        let mut pool = BlockPool::new(8, 4, 1, 2);
        let toks: Vec<TokenId> = (0..12).collect();
        let hit = pool.find_cached_prefix(&toks, &compute_block_keys(12, 4, None, None));
        assert_eq!(hit, CachedPrefix::default());
    }

    #[test]
    fn partial_tail_block_is_not_indexed() {
        let mut pool = BlockPool::new(8, 4, 1, 2);
        let toks: Vec<TokenId> = (0..10).collect();
        let mut table = BlockTable::default();
        table.push_fresh(&pool.allocate(3).unwrap());
        let ids = table.blocks().to_vec();
        fill_blocks(&mut pool, &ids, 10);
        pool.commit_and_free(&mut table, &toks, &compute_block_keys(10, 4, None, None));
        assert!(pool.info(ids[0]).digest.is_some());
        assert!(pool.info(ids[1]).digest.is_some());
        assert!(pool.info(ids[2]).digest.is_none());
        assert_eq!(pool.cached_count(), 2);
        assert_eq!(pool.free_count(), 8);
        pool.check_invariants().unwrap();
    }

    #[test]
    fn identical_requests_reuse_full_blocks() {
        let mut pool = BlockPool::new(16, 4, 1, 2);
        let toks: Vec<TokenId> = (100..114).collect();
        let keys = compute_block_keys(14, 4, None, None);
        assert_eq!(run_request(&mut pool, &toks, &keys), 0);
        assert_eq!(run_request(&mut pool, &toks, &keys), 12);
        pool.check_invariants().unwrap();
    }

    #[test]
    fn eviction_takes_least_recently_released() {
        let mut pool = BlockPool::new(4, 2, 1, 2);
        let mut tables = Vec::new();
        for r in 0..4u32 {
            let toks = vec![r * 10, r * 10 + 1];
            let mut t = BlockTable::default();
            t.push_fresh(&pool.allocate(1).unwrap());
            let ids = t.blocks().to_vec();
            fill_blocks(&mut pool, &ids, 2);
            tables.push((t, toks));
        }
        assert_eq!(pool.free_count(), 0);
        let keys = vec![String::new()];
        let mut released = Vec::new();
        for (t, toks) in tables.iter_mut() {
            released.push(t.blocks()[0]);
            pool.commit_and_free(t, toks, &keys);
        }
        assert_eq!(pool.cached_count(), 4);
        let first_digest = pool.info(released[0]).digest.unwrap();
        let got = pool.allocate(1).unwrap();
        assert_eq!(got, vec![released[0]]);
        assert!(pool.lookup(first_digest).is_none());
        assert_eq!(pool.cached_count(), 3);
        pool.check_invariants().unwrap();
    }

    #[test]
    fn hit_on_free_block_pins_it() {
        let mut pool = BlockPool::new(4, 2, 1, 2);
        let toks: Vec<TokenId> = vec![1, 2, 3, 4, 5];
        let keys = compute_block_keys(5, 2, None, None);
        run_request(&mut pool, &toks, &keys);
        let hit = pool.find_cached_prefix(&toks[..4], &keys);
        assert_eq!(hit.hit_tokens, 4);
        assert_eq!(pool.free_count(), 2);
        // Pinned blocks survive allocation pressure.
        let rest = pool.allocate(2).unwrap();
        assert!(rest.iter().all(|id| !hit.blocks.contains(id)));
        assert!(pool.allocate(1).is_err());
        pool.check_invariants().unwrap();
    }

    #[test]
    fn reading_unpinned_block_is_consistency_error() {
        let mut pool = BlockPool::new(4, 2, 1, 2);
        let ids = pool.allocate(1).unwrap();
        fill_blocks(&mut pool, &ids, 2);
        pool.ensure_readable(&ids, 2).unwrap();
        pool.release(&ids);
        assert!(matches!(
            pool.ensure_readable(&ids, 2),
            Err(CacheError::Consistency(_))
        ));
    }

    #[test]
    fn dump_lists_every_block() {
        let mut pool = BlockPool::new(3, 2, 1, 2);
        pool.allocate(1).unwrap();
        let mut buf = Vec::new();
        pool.dump_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["state"], "pinned");
        assert_eq!(lines[1]["state"], "free");
        assert!(lines[1]["digest"].is_null());
    }
}
