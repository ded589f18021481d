use std::collections::{HashSet, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use super::{Request, RequestId, RequestState, SchedulerConfig, SchedulerError};
use crate::metrics::Clock;

#[derive(Debug, Default)]
struct Inner {
    pending: VecDeque<Request>,
    live: HashSet<RequestId>,
}

/// Multi-producer queue between submitters and the engine loop.
///
/// Arrival is stamped under the lock, so queue order equals arrival order.
#[derive(Debug, Clone)]
pub struct Intake {
    inner: Arc<Mutex<Inner>>,
    clock: Arc<dyn Clock>,
    config: SchedulerConfig,
}

impl Intake {
    pub fn new(clock: Arc<dyn Clock>, config: SchedulerConfig) -> Self {
        Self {
            inner: Arc::default(),
            clock,
            config,
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn validate(&self, req: &Request) -> Result<(), SchedulerError> {
        if req.prompt_len() == 0 {
            return Err(SchedulerError::EmptyPrompt(req.id));
        }
        if req.max_new_tokens == 0 {
            return Err(SchedulerError::ZeroGeneration(req.id));
        }
        if !self.config.chunked_prefill && req.prompt_len() > self.config.token_budget {
            return Err(SchedulerError::PromptExceedsBudget {
                id: req.id,
                prompt_len: req.prompt_len(),
                budget: self.config.token_budget,
            });
        }
        Ok(())
    }

    pub fn submit(&self, req: Request) -> Result<RequestId, SchedulerError> {
        self.submit_batch(vec![req]).map(|ids| ids[0])
    }

    /// Enqueues all requests with one arrival stamp, or none of them.
    pub fn submit_batch(&self, reqs: Vec<Request>) -> Result<Vec<RequestId>, SchedulerError> {
        for r in &reqs {
            self.validate(r)?;
        }
        let mut inner = self.lock();
        let mut seen = HashSet::new();
        for r in &reqs {
            if inner.live.contains(&r.id) || !seen.insert(r.id) {
                return Err(SchedulerError::DuplicateId(r.id));
            }
        }
        let now = self.clock.now();
        let mut ids = Vec::with_capacity(reqs.len());
        for mut r in reqs {
            r.state = RequestState::Queued;
            r.timestamps.arrival = r.arrival_hint.map_or(now, |t| t.min(now));
            inner.live.insert(r.id);
            ids.push(r.id);
            inner.pending.push_back(r);
        }
        Ok(ids)
    }

    pub(crate) fn drain(&self) -> Vec<Request> {
        self.lock().pending.drain(..).collect()
    }

    pub(crate) fn retire(&self, id: RequestId) {
        self.lock().live.remove(&id);
    }

    pub fn pending(&self) -> usize {
        self.lock().pending.len()
    }

    /// Requests submitted and not yet finished or failed.
    pub fn live(&self) -> usize {
        self.lock().live.len()
    }
}
