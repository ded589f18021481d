//! Turn sequencing shared by the synchronous and asynchronous drivers. An
//! instance submits its next stage once its previous one is done; in lockstep
//! every instance waits for all others to finish the stage first.

use std::collections::HashMap;
use std::time::Duration;

use alora_serve::{
    CompletedRequest, FailedRequest, FailureRecord, MetricsTable, RequestId, RequestSpec, RequestTag, TokenId,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::pipeline::{PipelineKind, PipelineSpec};
use crate::setup::{adapter_id, random_prompt, EngineSettings};

pub const STAGE_BASE: &str = "base";
pub const STAGE_ADAPTER: &str = "adapter";
pub const STAGE_FINAL: &str = "final_base";

/// One completed request of a pipeline instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub instance: usize,
    /// Position of the turn within the pipeline.
    pub step: usize,
    pub stage: String,
    pub adapter: Option<usize>,
    pub request_id: u64,
    pub prompt_len: usize,
    pub hit_tokens: usize,
    pub generated: Vec<TokenId>,
    #[serde(skip)]
    pub logits: Option<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, Default)]
struct Instance {
    prompt: Vec<TokenId>,
    stage: usize,
    outstanding: usize,
    /// Conversation after the first stage.
    conversation: Vec<TokenId>,
    evals: Vec<Vec<TokenId>>,
    arrival: Option<Duration>,
    done: bool,
}

struct Turn {
    stage: &'static str,
    adapter: Option<usize>,
    prompt: Vec<TokenId>,
    gen: usize,
}

pub(crate) struct Driver {
    spec: PipelineSpec,
    invocation: Vec<TokenId>,
    instances: Vec<Instance>,
    owner: HashMap<RequestId, (usize, Option<usize>)>,
    next_id: u64,
    records: Vec<StageRecord>,
    table: MetricsTable,
    remaining: usize,
    lockstep: bool,
}

impl Driver {
    pub fn new(spec: &PipelineSpec, settings: &EngineSettings, n_instances: usize, lockstep: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let instances = (0..n_instances)
            .map(|_| Instance {
                prompt: random_prompt(&mut rng, spec.prompt_len, settings.model.vocab_size),
                ..Instance::default()
            })
            .collect();
        Self {
            spec: spec.clone(),
            invocation: settings.invocation_tokens(),
            instances,
            owner: HashMap::new(),
            next_id: 0,
            records: Vec::new(),
            table: MetricsTable::default(),
            remaining: n_instances,
            lockstep,
        }
    }


    pub fn all_done(&self) -> bool {
        self.remaining == 0
    }

    pub fn unfinished(&self) -> usize {
        self.remaining
    }

    fn with_invocation(&self, mut tokens: Vec<TokenId>) -> Vec<TokenId> {
        tokens.extend_from_slice(&self.invocation);
        tokens
    }

    fn turns(&self, inst: &Instance) -> Vec<Turn> {
        let s = &self.spec;
        let base = |prompt: Vec<TokenId>, gen| Turn { stage: STAGE_BASE, adapter: None, prompt, gen };
        let adapter = |i, prompt, stage| Turn { stage, adapter: Some(i), prompt, gen: s.adapter_gen_len };
        match (s.kind, inst.stage) {
            (PipelineKind::AdapterBase, 0) => {
                vec![adapter(0, self.with_invocation(inst.prompt.clone()), STAGE_ADAPTER)]
            }
            (PipelineKind::AdapterBase, 1) => vec![base(inst.conversation.clone(), s.base_gen_len)],
            (_, 0) => vec![base(inst.prompt.clone(), s.base_gen_len)],
            (PipelineKind::BaseAdapter | PipelineKind::BaseAdapterBase, 1) => {
                vec![adapter(0, self.with_invocation(inst.conversation.clone()), STAGE_ADAPTER)]
            }
            (PipelineKind::MultiAdapter, 1) => (0..s.n_adapters)
                .map(|i| adapter(i, self.with_invocation(inst.conversation.clone()), STAGE_ADAPTER))
                .collect(),
            (PipelineKind::BaseAdapterBase | PipelineKind::MultiAdapter, 2) => {
                let mut prompt = inst.conversation.clone();
                for eval in &inst.evals {
                    prompt.extend_from_slice(&self.invocation);
                    prompt.extend_from_slice(eval);
                }
                vec![Turn {
                    stage: STAGE_FINAL,
                    adapter: None,
                    prompt,
                    gen: s.adapter_gen_len,
                }]
            }
            _ => Vec::new(),
        }
    }

    fn issue(&mut self, i: usize) -> Vec<RequestSpec> {
        let turns = self.turns(&self.instances[i]);
        if turns.is_empty() {
            self.instances[i].done = true;
            self.remaining -= 1;
            return Vec::new();
        }
        let inst = &mut self.instances[i];
        inst.outstanding = turns.len();
        inst.evals = vec![Vec::new(); turns.iter().filter(|t| t.adapter.is_some()).count()];
        let mode = self.spec.mode.as_str();
        let kind = self.spec.kind.as_str();
        turns
            .into_iter()
            .map(|t| {
                let id = RequestId(self.next_id);
                self.next_id += 1;
                self.owner.insert(id, (i, t.adapter));
                let mut spec = RequestSpec::new(id.0, t.prompt, t.gen).with_tag(RequestTag::new(kind, t.stage, mode));
                if let Some(a) = t.adapter {
                    spec = spec.with_adapter(adapter_id(a));
                }
                if let (0, Some(at)) = (self.instances[i].stage, self.instances[i].arrival) {
                    spec = spec.arrived_at(at);
                }
                spec
            })
            .collect()
    }

    /// First-stage requests of instance `i`.
    pub fn launch(&mut self, i: usize, arrival: Option<Duration>) -> Vec<RequestSpec> {
        self.instances[i].arrival = arrival;
        self.issue(i)
    }

    /// Records a completion and returns the requests it unblocks.
    pub fn on_complete(&mut self, c: &CompletedRequest) -> Vec<RequestSpec> {
        let Some(&(i, adapter)) = self.owner.get(&c.id()) else {
            return Vec::new();
        };
        self.table.rows.push(c.metrics.clone());
        let inst = &mut self.instances[i];
        self.records.push(StageRecord {
            instance: i,
            step: inst.stage,
            stage: c.request.tag.stage.clone(),
            adapter,
            request_id: c.id().0,
            prompt_len: c.request.prompt_len(),
            hit_tokens: c.metrics.cache_hit_tokens,
            generated: c.generated().to_vec(),
            logits: c.logits().map(<[_]>::to_vec),
        });
        if inst.stage == 0 {
            inst.conversation = c.request.tokens().to_vec();
        } else if let Some(a) = adapter {
            inst.evals[a] = c.generated().to_vec();
        }
        inst.outstanding -= 1;
        if inst.outstanding > 0 {
            return Vec::new();
        }
        inst.stage += 1;
        if !self.lockstep {
            return self.issue(i);
        }
        if self.instances.iter().any(|x| !x.done && x.outstanding > 0) {
            return Vec::new();
        }
        let ready: Vec<usize> = (0..self.instances.len()).filter(|&j| !self.instances[j].done).collect();
        ready.into_iter().flat_map(|j| self.issue(j)).collect()
    }

    /// Drops the failed request's instance.
    pub fn on_failed(&mut self, f: &FailedRequest) {
        self.table.failures.push(f.record());
        if let Some(&(i, _)) = self.owner.get(&f.id) {
            let inst = &mut self.instances[i];
            if !inst.done {
                inst.done = true;
                self.remaining -= 1;
            }
        }
    }

    /// Records requests the engine refused and drops their instances.
    pub fn reject(&mut self, specs: &[RequestSpec], reason: &str) {
        for spec in specs {
            self.table.failures.push(FailureRecord {
                request_id: spec.id.0,
                mode: spec.tag.mode.clone(),
                pipeline: spec.tag.pipeline.clone(),
                stage: spec.tag.stage.clone(),
                reason: reason.to_string(),
            });
            if let Some(&(i, _)) = self.owner.get(&spec.id) {
                let inst = &mut self.instances[i];
                if !inst.done {
                    inst.done = true;
                    self.remaining -= 1;
                }
            }
        }
    }

    pub fn finish(mut self) -> (MetricsTable, Vec<StageRecord>) {
        self.records.sort_by_key(|r| (r.instance, r.step, r.adapter));
        self.table.rows.sort_by_key(|r| r.request_id);
        (self.table, self.records)
    }
}
