//! Request lifecycle: input processing (adapter resolution, invocation
//! detection), scheduling, batched model execution with activation masks,
//! and output assembly.

mod config;
mod metadata;

pub use config::{ComparisonMode, EngineConfig};
pub use metadata::{build_alora_metadata, detect_invocation, AloraMetadata, MaskSpan};

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::kv_cache::{BlockPool, CacheError};
use crate::metrics::{finalize, Clock, FailureRecord, MetricsError, MetricsTable, RequestMetrics};
use crate::model::{
    greedy_next_token, AdapterMode, ForwardContext, LoraAdapter, ModelError, SeqItem, Transformer,
};
use crate::scheduler::{
    AdapterBinding, Intake, Request, RequestId, RequestTag, Scheduler, SchedulerError, StepTrace,
};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error("invocation sequence must be non-empty")]
    EmptyInvocation,
    #[error("invocation sequence {invocation:?} not found in prompt")]
    InvocationNotFound { invocation: Vec<TokenId> },
    #[error("request {id} needs {needed} KV blocks but the pool has {pool_blocks}")]
    RequestTooLarge {
        id: RequestId,
        needed: usize,
        pool_blocks: usize,
    },
    #[error("request {id} failed: {reason}")]
    RequestFailed { id: RequestId, reason: String },
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Json(#[from] serde_json::Error),
}

/// A request as submitted by a client, before input processing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestSpec {
    pub id: RequestId,
    pub prompt: Vec<TokenId>,
    pub adapter_id: Option<String>,
    pub max_new_tokens: usize,
    pub tag: RequestTag,
    /// Arrival time to record when the request reaches the engine late.
    pub arrival_hint: Option<Duration>,
}

impl RequestSpec {
    pub fn new(id: u64, prompt: Vec<TokenId>, max_new_tokens: usize) -> Self {
        Self {
            id: RequestId(id),
            prompt,
            adapter_id: None,
            max_new_tokens,
            tag: RequestTag::default(),
            arrival_hint: None,
        }
    }

    pub fn with_adapter(mut self, adapter_id: impl Into<String>) -> Self {
        self.adapter_id = Some(adapter_id.into());
        self
    }

    pub fn with_tag(mut self, tag: RequestTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn arrived_at(mut self, t: Duration) -> Self {
        self.arrival_hint = Some(t);
        self
    }
}

#[derive(Debug, Clone)]
pub struct CompletedRequest {
    pub request: Request,
    pub metrics: RequestMetrics,
}

impl CompletedRequest {
    pub fn id(&self) -> RequestId {
        self.request.id
    }

    pub fn generated(&self) -> &[TokenId] {
        self.request.generated()
    }

    pub fn logits(&self) -> Option<&[Vec<f32>]> {
        self.request.logits.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailedRequest {
    pub id: RequestId,
    pub tag: RequestTag,
    pub reason: String,
}

impl FailedRequest {
    pub fn record(&self) -> FailureRecord {
        FailureRecord {
            request_id: self.id.0,
            mode: self.tag.mode.clone(),
            pipeline: self.tag.pipeline.clone(),
            stage: self.tag.stage.clone(),
            reason: self.reason.clone(),
        }
    }
}

#[derive(Debug, Default)]
pub struct StepReport {
    /// `None` when nothing was runnable.
    pub trace: Option<StepTrace>,
    pub completed: Vec<CompletedRequest>,
    pub failed: Vec<FailedRequest>,
}

#[derive(Debug, Default)]
pub struct RunOutcome {
    pub completed: Vec<CompletedRequest>,
    pub failed: Vec<FailedRequest>,
}

impl RunOutcome {
    pub fn table(&self) -> MetricsTable {
        MetricsTable {
            rows: self.completed.iter().map(|c| c.metrics.clone()).collect(),
            failures: self.failed.iter().map(FailedRequest::record).collect(),
        }
    }

    pub fn get(&self, id: RequestId) -> Option<&CompletedRequest> {
        self.completed.iter().find(|c| c.id() == id)
    }
}

type AdapterRegistry = HashMap<String, Arc<LoraAdapter>>;

/// Cloneable, thread-safe submission front end.
#[derive(Debug, Clone)]
pub struct EngineHandle {
    intake: Intake,
    adapters: Arc<AdapterRegistry>,
    block_size: usize,
    pool_blocks: usize,
    max_seq_len: usize,
    record_logits: bool,
}

impl EngineHandle {
    pub fn clock(&self) -> &Arc<dyn Clock> {
        self.intake.clock()
    }

    /// Input processing: resolves the adapter, locates the invocation
    /// sequence for activated adapters, and checks sizing.
    pub fn prepare(&self, spec: RequestSpec) -> Result<Request, EngineError> {
        let mut req = Request::new(spec.id, spec.prompt, spec.max_new_tokens).with_tag(spec.tag);
        req.arrival_hint = spec.arrival_hint;
        if let Some(adapter_id) = spec.adapter_id {
            let adapter = self
                .adapters
                .get(&adapter_id)
                .ok_or_else(|| EngineError::UnknownAdapter(adapter_id.clone()))?;
            let inv_start = match adapter.invocation_tokens() {
                Some(inv) if adapter.mode() == AdapterMode::Activated => {
                    Some(detect_invocation(req.prompt(), inv)?)
                }
                _ => None,
            };
            let binding = AdapterBinding {
                adapter_id,
                mode: adapter.mode(),
            };
            req = req.with_adapter(binding, inv_start);
        }
        let kv_len = req.max_kv_len();
        if kv_len > self.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                position: kv_len,
                max: self.max_seq_len,
            }
            .into());
        }
        let needed = kv_len.div_ceil(self.block_size);
        if needed > self.pool_blocks {
            return Err(EngineError::RequestTooLarge {
                id: req.id,
                needed,
                pool_blocks: self.pool_blocks,
            });
        }
        if self.record_logits {
            req.logits = Some(Vec::new());
        }
        Ok(req)
    }

    pub fn submit(&self, spec: RequestSpec) -> Result<RequestId, EngineError> {
        let req = self.prepare(spec)?;
        Ok(self.intake.submit(req)?)
    }

    /// Prepares every spec first, then enqueues them together.
    pub fn submit_batch(&self, specs: Vec<RequestSpec>) -> Result<Vec<RequestId>, EngineError> {
        let reqs = specs
            .into_iter()
            .map(|s| self.prepare(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.intake.submit_batch(reqs)?)
    }

    /// Requests submitted and not yet finished or failed.
    pub fn live(&self) -> usize {
        self.intake.live()
    }
}

pub struct Engine {
    config: EngineConfig,
    model: Arc<Transformer>,
    pool: BlockPool,
    scheduler: Scheduler,
    handle: EngineHandle,
    clock: Arc<dyn Clock>,
    trace: Option<Vec<StepTrace>>,
    backlog: RunOutcome,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("scheduler", &self.scheduler)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(config: EngineConfig, clock: Arc<dyn Clock>) -> Result<Self, EngineError> {
        config.validate()?;
        let model = Arc::new(Transformer::from_config(&config.model)?);
        Self::with_model(config, model, clock)
    }

    /// Builds an engine over existing base weights, which must match
    /// `config.model`.
    pub fn with_model(
        config: EngineConfig,
        model: Arc<Transformer>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(EngineError::InvalidConfig("model weights do not match the model config".into()));
        }
        let d_model = config.model.d_model;
        let mut adapters = AdapterRegistry::new();
        for def in &config.adapters {
            let adapter = LoraAdapter::from_definition(def, d_model)?;
            let adapter = match config.comparison_mode {
                ComparisonMode::Alora => adapter,
                ComparisonMode::Lora => adapter.as_standard(),
            };
            adapters.insert(def.adapter_id.clone(), Arc::new(adapter));
        }
        let intake = Intake::new(clock.clone(), config.scheduler);
        let handle = EngineHandle {
            intake: intake.clone(),
            adapters: Arc::new(adapters),
            block_size: config.block_size,
            pool_blocks: config.pool_blocks,
            max_seq_len: config.model.max_seq_len,
            record_logits: config.record_logits,
        };
        Ok(Self {
            pool: BlockPool::new(config.pool_blocks, config.block_size, config.model.n_layers, d_model),
            scheduler: Scheduler::new(config.scheduler, intake, config.prefix_caching),
            handle,
            model,
            clock,
            config,
            trace: None,
            backlog: RunOutcome::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn handle(&self) -> EngineHandle {
        self.handle.clone()
    }

    pub fn submit(&self, spec: RequestSpec) -> Result<RequestId, EngineError> {
        self.handle.submit(spec)
    }

    pub fn submit_batch(&self, specs: Vec<RequestSpec>) -> Result<Vec<RequestId>, EngineError> {
        self.handle.submit_batch(specs)
    }

    pub fn has_work(&self) -> bool {
        self.scheduler.has_work()
    }

    /// Starts keeping a step trace.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<StepTrace> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Schedules and executes one batch.
    pub fn step(&mut self) -> Result<StepReport, EngineError> {
        let plan = self.scheduler.schedule_step(self.clock.now(), &mut self.pool);
        let mut report = StepReport {
            failed: plan
                .failed
                .iter()
                .map(|(r, e)| FailedRequest {
                    id: r.id,
                    tag: r.tag.clone(),
                    reason: e.to_string(),
                })
                .collect(),
            ..StepReport::default()
        };
        if plan.is_empty() {
            return Ok(report);
        }

        let output = {
            let mut items = Vec::with_capacity(plan.items.len());
            let mut spans = Vec::with_capacity(plan.items.len());
            let mut any_activated = false;
            for s in &plan.items {
                let r = self.scheduler.request(s.request_id).expect("scheduled request is running");
                let adapter = r.adapter.as_ref().map(|b| self.handle.adapters[&b.adapter_id].as_ref());
                any_activated |= adapter.is_some_and(|a| a.mode() == AdapterMode::Activated);
                items.push(SeqItem {
                    tokens: &r.tokens()[s.range()],
                    start_pos: s.start,
                    block_table: r.block_table.blocks(),
                    adapter,
                });
                spans.push(MaskSpan {
                    start_pos: s.start,
                    len: s.len,
                    inv_start: r.effective_inv_start(),
                });
            }
            let ctx = ForwardContext {
                mask: any_activated.then(|| build_alora_metadata(&spans).mask),
            };
            self.model.forward_step(&mut self.pool, &items, &ctx)
        };
        let output = match output {
            Ok(o) => o,
            Err(e) => {
                for s in &plan.items {
                    self.scheduler.abort(&mut self.pool, s.request_id);
                }
                return Err(e.into());
            }
        };

        if self.clock.is_virtual() {
            let tokens = plan.items.iter().map(|s| s.len as u64).sum();
            self.clock
                .advance(self.config.virtual_cost.step_duration(tokens, output.attended_pairs));
        }
        let end = self.clock.now();
        for (s, logits) in plan.items.iter().zip(output.logits) {
            let token = greedy_next_token(&logits);
            let record = self.config.record_logits.then_some(logits);
            if let Some(req) =
                self.scheduler
                    .on_tokens_processed(&mut self.pool, s.request_id, s.range(), token, record, end)?
            {
                let metrics = finalize(&req)?;
                report.completed.push(CompletedRequest { request: req, metrics });
            }
        }
        let trace = plan.trace(self.pool.free_count());
        if let Some(t) = self.trace.as_mut() {
            t.push(trace.clone());
        }
        report.trace = Some(trace);
        Ok(report)
    }

    /// Steps until no request is waiting or running.
    pub fn run_until_idle(&mut self) -> Result<RunOutcome, EngineError> {
        let mut out = std::mem::take(&mut self.backlog);
        while self.scheduler.has_work() {
            let report = self.step()?;
            out.completed.extend(report.completed);
            out.failed.extend(report.failed);
        }
        Ok(out)
    }

    /// Submits one request and steps until it finishes. Other requests that
    /// finish meanwhile are returned by the next [`Engine::run_until_idle`].
    pub fn run_request(&mut self, spec: RequestSpec) -> Result<CompletedRequest, EngineError> {
        let id = self.submit(spec)?;
        loop {
            let report = self.step()?;
            let mut mine = None;
            for c in report.completed {
                if c.id() == id {
                    mine = Some(c);
                } else {
                    self.backlog.completed.push(c);
                }
            }
            for f in report.failed {
                if f.id == id {
                    return Err(EngineError::RequestFailed { id, reason: f.reason });
                }
                self.backlog.failed.push(f);
            }
            if let Some(c) = mine {
                return Ok(c);
            }
            if !self.scheduler.has_work() {
                return Err(EngineError::RequestFailed {
                    id,
                    reason: "engine went idle before the request finished".into(),
                });
            }
        }
    }
}
