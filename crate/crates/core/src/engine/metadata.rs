use super::EngineError;
use crate::model::ActivationMask;
use crate::TokenId;

/// Index of the first token of the last occurrence of `invocation` in `prompt`.
pub fn detect_invocation(prompt: &[TokenId], invocation: &[TokenId]) -> Result<usize, EngineError> {
    if invocation.is_empty() {
        return Err(EngineError::EmptyInvocation);
    }
    prompt
        .windows(invocation.len())
        .rposition(|w| w == invocation)
        .ok_or(EngineError::InvocationNotFound {
            invocation: invocation.to_vec(),
        })
}

/// A request's contiguous span within a step, with its mask boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpan {
    pub start_pos: usize,
    pub len: usize,
    pub inv_start: usize,
}

/// Flattened per-token mask for a step plus each request's boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AloraMetadata {
    pub mask: ActivationMask,
    pub inv_starts: Vec<usize>,
}

pub fn build_alora_metadata(spans: &[MaskSpan]) -> AloraMetadata {
    let mut mask = ActivationMask::new(Vec::with_capacity(spans.iter().map(|s| s.len).sum()));
    for s in spans {
        mask.extend(&ActivationMask::for_span(s.start_pos, s.len, s.inv_start));
    }
    AloraMetadata {
        mask,
        inv_starts: spans.iter().map(|s| s.inv_start).collect(),
    }
}
