//! Continuous batching with chunked prefill, FCFS admission and per-step
//! token budget. Lifecycle timestamps are stamped here.

mod intake;
mod request;

pub use intake::Intake;
pub use request::{AdapterBinding, Request, RequestId, RequestState, RequestTag, StageTimestamps};

use std::collections::{HashMap, VecDeque};
use std::ops::Range;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv_cache::{BlockPool, CacheError};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("request id {0} is already live")]
    DuplicateId(RequestId),
    #[error("request {0} has an empty prompt")]
    EmptyPrompt(RequestId),
    #[error("request {0} asks for zero new tokens")]
    ZeroGeneration(RequestId),
    #[error("request {id}: prompt of {prompt_len} tokens exceeds the token budget {budget} with chunked prefill off")]
    PromptExceedsBudget {
        id: RequestId,
        prompt_len: usize,
        budget: usize,
    },
    #[error("request {id}: processed span {got:?} does not match the issued span {expected:?}")]
    SpanMismatch {
        id: RequestId,
        expected: Option<Range<usize>>,
        got: Range<usize>,
    },
    #[error("request {id}: KV pool exhausted: {source}")]
    OutOfBlocks {
        id: RequestId,
        #[source]
        source: CacheError,
    },
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub token_budget: usize,
    pub max_batch_requests: usize,
    pub chunked_prefill: bool,
    /// Admit a request only when the pool can hold its whole sequence on top
    /// of what running requests may still claim. Without it, a running request
    /// that cannot grow fails.
    pub reserve_kv: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            token_budget: 64,
            max_batch_requests: 64,
            chunked_prefill: true,
            reserve_kv: true,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.token_budget == 0 {
            return Err(SchedulerError::InvalidConfig("token_budget must be at least 1".into()));
        }
        if self.max_batch_requests == 0 {
            return Err(SchedulerError::InvalidConfig("max_batch_requests must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledSpan {
    pub request_id: RequestId,
    pub start: usize,
    pub len: usize,
    pub kind: SpanKind,
}

impl ScheduledSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Default)]
pub struct StepPlan {
    pub step: u64,
    pub started_at: Duration,
    /// Decode spans first, then prefill chunks in admission order.
    pub items: Vec<ScheduledSpan>,
    /// Requests dropped this step; their blocks are already released.
    pub failed: Vec<(Request, SchedulerError)>,
    pub budget_used: usize,
}

impl StepPlan {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn trace(&self, pool_free: usize) -> StepTrace {
        StepTrace {
            step: self.step,
            scheduled: self
                .items
                .iter()
                .map(|s| TraceEntry {
                    request_id: s.request_id,
                    span: [s.start, s.start + s.len],
                    kind: s.kind,
                })
                .collect(),
            pool_free,
            budget_used: self.budget_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub request_id: RequestId,
    /// Half-open token range.
    pub span: [usize; 2],
    pub kind: SpanKind,
}

/// One JSON line of the step trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepTrace {
    pub step: u64,
    pub scheduled: Vec<TraceEntry>,
    pub pool_free: usize,
    pub budget_used: usize,
}

#[derive(Debug)]
pub struct Scheduler {
    config: SchedulerConfig,
    intake: Intake,
    prefix_caching: bool,
    waiting: VecDeque<Request>,
    running: Vec<Request>,
    inflight: HashMap<RequestId, Range<usize>>,
    step: u64,
    step_started: Duration,
}

fn blocks_for(tokens: usize, block_size: usize) -> usize {
    tokens.div_ceil(block_size)
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, intake: Intake, prefix_caching: bool) -> Self {
        Self {
            config,
            intake,
            prefix_caching,
            waiting: VecDeque::new(),
            running: Vec::new(),
            inflight: HashMap::new(),
            step: 0,
            step_started: Duration::ZERO,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn intake(&self) -> &Intake {
        &self.intake
    }

    pub fn submit(&self, req: Request) -> Result<RequestId, SchedulerError> {
        self.intake.submit(req)
    }

    pub fn num_waiting(&self) -> usize {
        self.waiting.len() + self.intake.pending()
    }

    pub fn num_running(&self) -> usize {
        self.running.len()
    }

    pub fn has_work(&self) -> bool {
        !self.waiting.is_empty() || !self.running.is_empty() || self.intake.pending() > 0
    }

    pub fn request(&self, id: RequestId) -> Option<&Request> {
        self.running
            .iter()
            .chain(self.waiting.iter())
            .find(|r| r.id == id)
    }

    /// Blocks running requests may still allocate before they finish.
    fn outstanding_blocks(&self, block_size: usize) -> usize {
        self.running
            .iter()
            .map(|r| blocks_for(r.max_kv_len(), block_size).saturating_sub(r.block_table.len()))
            .sum()
    }

    fn grow(pool: &mut BlockPool, r: &mut Request, upto_tokens: usize) -> Result<(), CacheError> {
        let need = blocks_for(upto_tokens, pool.block_size()).saturating_sub(r.block_table.len());
        if need > 0 {
            let ids = pool.allocate(need)?;
            r.block_table.push_fresh(&ids);
        }
        Ok(())
    }

    fn chunk_size(&self, remaining: usize, budget: usize) -> Option<usize> {
        if self.config.chunked_prefill {
            Some(remaining.min(budget))
        } else {
            (remaining <= budget).then_some(remaining)
        }
    }

    /// Plans one step: decode tokens, then running prefill chunks, then FCFS
    /// admission of waiting requests, all within the token budget.
    pub fn schedule_step(&mut self, now: Duration, pool: &mut BlockPool) -> StepPlan {
        debug_assert!(self.inflight.is_empty(), "previous step not fully reported");
        self.inflight.clear();
        self.waiting.extend(self.intake.drain());
        self.step += 1;
        self.step_started = now;
        let block_size = pool.block_size();
        let mut plan = StepPlan {
            step: self.step,
            started_at: now,
            ..StepPlan::default()
        };
        let mut budget = self.config.token_budget;
        let mut failed = Vec::new();

        for phase in [RequestState::Decoding, RequestState::Prefilling] {
            for r in self.running.iter_mut().filter(|r| r.state == phase) {
                if budget == 0 {
                    break;
                }
                let (kind, len) = match phase {
                    RequestState::Decoding => (SpanKind::Decode, 1),
                    _ => {
                        let remaining = r.prompt_len() - r.processed;
                        let chunk = if self.config.chunked_prefill {
                            Some(remaining.min(budget))
                        } else {
                            (remaining <= budget).then_some(remaining)
                        };
                        match chunk {
                            Some(c) => (SpanKind::Prefill, c),
                            None => continue,
                        }
                    }
                };
                if let Err(source) = Self::grow(pool, r, r.processed + len) {
                    failed.push((r.id, source));
                    continue;
                }
                plan.items.push(ScheduledSpan {
                    request_id: r.id,
                    start: r.processed,
                    len,
                    kind,
                });
                budget -= len;
            }
        }
        for (id, source) in failed {
            let pos = self.running.iter().position(|r| r.id == id).expect("failed request is running");
            let mut r = self.running.remove(pos);
            pool.free_table(&mut r.block_table);
            self.intake.retire(id);
            plan.failed.push((r, SchedulerError::OutOfBlocks { id, source }));
        }

        while budget > 0 && self.running.len() < self.config.max_batch_requests {
            let Some(mut r) = self.waiting.pop_front() else {
                break;
            };
            let hits = if self.prefix_caching {
                let n = r.prompt_len() - 1;
                let keys = r.block_keys(n, block_size);
                pool.find_cached_prefix(&r.prompt()[..n], &keys)
            } else {
                Default::default()
            };
            let remaining = r.prompt_len() - hits.hit_tokens;
            let Some(chunk) = self.chunk_size(remaining, budget) else {
                pool.release(&hits.blocks);
                self.waiting.push_front(r);
                break;
            };
            let need_now = blocks_for(hits.hit_tokens + chunk, block_size) - hits.blocks.len();
            let fits = if self.config.reserve_kv {
                let need_total = blocks_for(r.max_kv_len(), block_size) - hits.blocks.len();
                pool.free_count() >= self.outstanding_blocks(block_size) + need_total
            } else {
                pool.free_count() >= need_now
            };
            let allocated = if fits { pool.allocate(need_now) } else {
                Err(CacheError::Exhausted {
                    requested: need_now,
                    free: pool.free_count(),
                })
            };
            match allocated {
                Ok(ids) => {
                    r.block_table.push_hits(&hits.blocks);
                    r.block_table.push_fresh(&ids);
                    r.cache_hit_tokens = hits.hit_tokens;
                    r.processed = hits.hit_tokens;
                    r.state = RequestState::Prefilling;
                    plan.items.push(ScheduledSpan {
                        request_id: r.id,
                        start: r.processed,
                        len: chunk,
                        kind: SpanKind::Prefill,
                    });
                    budget -= chunk;
                    self.running.push(r);
                }
                Err(source) => {
                    pool.release(&hits.blocks);
                    if self.running.is_empty() {
                        let id = r.id;
                        self.intake.retire(id);
                        plan.failed.push((r, SchedulerError::OutOfBlocks { id, source }));
                        continue;
                    }
                    self.waiting.push_front(r);
                    break;
                }
            }
        }

        for item in &plan.items {
            self.inflight.insert(item.request_id, item.range());
        }
        plan.budget_used = self.config.token_budget - budget;
        plan
    }

    /// Records the outcome of a scheduled span. `token` is the greedy pick
    /// from the span's last position; it is kept only once the prompt is
    /// fully processed. Returns the request if it finished, after its blocks
    /// were committed and released.
    pub fn on_tokens_processed(
        &mut self,
        pool: &mut BlockPool,
        id: RequestId,
        span: Range<usize>,
        token: TokenId,
        logits: Option<Vec<f32>>,
        now: Duration,
    ) -> Result<Option<Request>, SchedulerError> {
        let expected = self.inflight.remove(&id);
        if expected.as_ref() != Some(&span) {
            return Err(SchedulerError::SpanMismatch { id, expected, got: span });
        }
        let pos = self
            .running
            .iter()
            .position(|r| r.id == id)
            .ok_or(SchedulerError::SpanMismatch { id, expected: None, got: span.clone() })?;
        let r = &mut self.running[pos];
        if r.timestamps.prefill_start.is_none() {
            r.timestamps.prefill_start = Some(self.step_started);
        }
        r.processed = span.end;
        let emits = match r.state {
            RequestState::Prefilling if r.processed == r.prompt_len() => {
                r.timestamps.decode_start = Some(now);
                r.state = RequestState::Decoding;
                true
            }
            RequestState::Prefilling => false,
            RequestState::Decoding => true,
            RequestState::Queued | RequestState::Finished => {
                return Err(SchedulerError::SpanMismatch { id, expected: None, got: span });
            }
        };
        if emits {
            r.push_generated(token);
            if let (Some(store), Some(l)) = (r.logits.as_mut(), logits) {
                store.push(l);
            }
        }
        if r.state == RequestState::Decoding && r.generated().len() >= r.max_new_tokens {
            r.timestamps.finish = Some(now);
            r.state = RequestState::Finished;
            let mut r = self.running.remove(pos);
            if self.prefix_caching {
                let keys = r.block_keys(r.processed, pool.block_size());
                let computed = r.tokens()[..r.processed].to_vec();
                pool.commit_and_free(&mut r.block_table, &computed, &keys);
            } else {
                pool.free_table(&mut r.block_table);
            }
            self.intake.retire(id);
            return Ok(Some(r));
        }
        Ok(None)
    }

    /// Drops a running request after an execution error, releasing its blocks.
    pub fn abort(&mut self, pool: &mut BlockPool, id: RequestId) -> Option<Request> {
        self.inflight.remove(&id);
        let pos = self.running.iter().position(|r| r.id == id)?;
        let mut r = self.running.remove(pos);
        pool.free_table(&mut r.block_table);
        self.intake.retire(id);
        Some(r)
    }
}
