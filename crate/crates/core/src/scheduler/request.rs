use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::kv_cache::{compute_block_keys, BlockTable};
use crate::model::AdapterMode;
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RequestState {
    Queued,
    Prefilling,
    Decoding,
    Finished,
}

/// Labels carried through to metrics rows.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestTag {
    pub pipeline: String,
    pub stage: String,
    pub mode: String,
}

impl RequestTag {
    pub fn new(pipeline: impl Into<String>, stage: impl Into<String>, mode: impl Into<String>) -> Self {
        Self {
            pipeline: pipeline.into(),
            stage: stage.into(),
            mode: mode.into(),
        }
    }
}

/// Adapter a request runs under, with the mode it actually executes in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterBinding {
    pub adapter_id: String,
    pub mode: AdapterMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageTimestamps {
    pub arrival: Duration,
    pub prefill_start: Option<Duration>,
    pub decode_start: Option<Duration>,
    pub finish: Option<Duration>,
}

#[derive(Debug, Clone)]
pub struct Request {
    pub id: RequestId,
    tokens: Vec<TokenId>,
    prompt_len: usize,
    pub adapter: Option<AdapterBinding>,
    /// Activation point; set only for activated adapters.
    pub inv_start: Option<usize>,
    pub max_new_tokens: usize,
    pub tag: RequestTag,
    pub state: RequestState,
    /// Tokens whose KV has been computed or reused.
    pub processed: usize,
    pub timestamps: StageTimestamps,
    pub block_table: BlockTable,
    pub cache_hit_tokens: usize,
    /// Logits that produced each generated token, when recording is on.
    pub logits: Option<Vec<Vec<f32>>>,
    /// Arrival time to stamp instead of the submission time, if earlier.
    pub arrival_hint: Option<Duration>,
}

impl Request {
    pub fn new(id: RequestId, prompt: Vec<TokenId>, max_new_tokens: usize) -> Self {
        Self {
            id,
            prompt_len: prompt.len(),
            tokens: prompt,
            adapter: None,
            inv_start: None,
            max_new_tokens,
            tag: RequestTag::default(),
            state: RequestState::Queued,
            processed: 0,
            timestamps: StageTimestamps::default(),
            block_table: BlockTable::default(),
            cache_hit_tokens: 0,
            logits: None,
            arrival_hint: None,
        }
    }

    pub fn with_adapter(mut self, binding: AdapterBinding, inv_start: Option<usize>) -> Self {
        self.inv_start = match binding.mode {
            AdapterMode::Activated => inv_start,
            AdapterMode::Standard => None,
        };
        self.adapter = Some(binding);
        self
    }

    pub fn with_tag(mut self, tag: RequestTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    /// Prompt followed by generated tokens.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn push_generated(&mut self, token: TokenId) {
        self.tokens.push(token);
    }

    /// Largest number of KV slots this request can ever occupy.
    pub fn max_kv_len(&self) -> usize {
        self.prompt_len + self.max_new_tokens.saturating_sub(1)
    }

    /// Hash extra keys for the full blocks among the first `n_tokens`.
    pub fn block_keys(&self, n_tokens: usize, block_size: usize) -> Vec<String> {
        compute_block_keys(
            n_tokens,
            block_size,
            self.adapter.as_ref().map(|a| a.adapter_id.as_str()),
            self.inv_start,
        )
    }

    /// Mask boundary for a token span: the activation point for activated
    /// adapters, otherwise past the end of the sequence.
    pub fn effective_inv_start(&self) -> usize {
        self.inv_start.unwrap_or(self.prompt_len + self.max_new_tokens)
    }
}
