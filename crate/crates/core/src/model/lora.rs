use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::weights::uniform_matrix;
use super::ModelError;
use crate::tensor::{vec_mat_into, Matrix};
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    fn index(self) -> usize {
        match self {
            Projection::Q => 0,
            Projection::K => 1,
            Projection::V => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    /// Deltas apply to every token.
    Standard,
    /// Deltas apply only from the invocation sequence onward.
    Activated,
}

/// Adapter definition file.
///
/// `invocation_tokens` absent means a standard LoRA; present (and non-empty)
/// means an activated adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDefinition {
    pub adapter_id: String,
    pub rank: usize,
    pub seed: u64,
    pub targets: Vec<Projection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invocation_tokens: Option<Vec<TokenId>>,
}

impl AdapterDefinition {
    pub fn mode(&self) -> AdapterMode {
        if self.invocation_tokens.is_some() {
            AdapterMode::Activated
        } else {
            AdapterMode::Standard
        }
    }
}

/// One low-rank update `B·A` for a `d_model x d_model` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDelta {
    /// `rank x d_model`
    pub a: Matrix,
    /// `d_model x rank`
    pub b: Matrix,
}

impl LowRankDelta {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `out += (x · B) · A`
    pub fn add_to_row(&self, x: &[f32], out: &mut [f32]) {
        let mut shrunk = vec![0.0f32; self.rank()];
        vec_mat_into(x, &self.b, &mut shrunk);
        let mut expanded = vec![0.0f32; self.a.cols()];
        vec_mat_into(&shrunk, &self.a, &mut expanded);
        out.iter_mut().zip(&expanded).for_each(|(o, e)| *o += e);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    id: String,
    rank: usize,
    deltas: [Option<LowRankDelta>; 3],
    invocation_tokens: Option<Vec<TokenId>>,
}

impl LoraAdapter {
    /// Builds an adapter from explicit matrices.
    pub fn new(
        id: impl Into<String>,
        deltas: Vec<(Projection, LowRankDelta)>,
        invocation_tokens: Option<Vec<TokenId>>,
        d_model: usize,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        let err = |detail: String| ModelError::AdapterConfig {
            adapter: id.clone(),
            detail,
        };
        if deltas.is_empty() {
            return Err(err("no target projections".into()));
        }
        let rank = deltas[0].1.rank();
        if rank == 0 || 2 * rank > d_model {
            return Err(err(format!(
                "rank {rank} must be in 1..={} for d_model {d_model}",
                d_model / 2
            )));
        }
        let mut slots: [Option<LowRankDelta>; 3] = [None, None, None];
        for (proj, delta) in deltas {
            if delta.a.shape() != (rank, d_model) || delta.b.shape() != (d_model, rank) {
                return Err(err(format!(
                    "{proj:?} delta has A {:?} and B {:?}, expected ({rank}, {d_model}) and ({d_model}, {rank})",
                    delta.a.shape(),
                    delta.b.shape()
                )));
            }
            if slots[proj.index()].replace(delta).is_some() {
                return Err(err(format!("duplicate target {proj:?}")));
            }
        }
        if matches!(&invocation_tokens, Some(t) if t.is_empty()) {
            return Err(err("invocation_tokens present but empty".into()));
        }
        Ok(Self {
            id,
            rank,
            deltas: slots,
            invocation_tokens,
        })
    }

    /// Generates random deltas for every target from the definition's seed.
    pub fn from_definition(def: &AdapterDefinition, d_model: usize) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(def.seed);
        if def.rank == 0 {
            return Err(ModelError::AdapterConfig {
                adapter: def.adapter_id.clone(),
                detail: "rank must be at least 1".into(),
            });
        }
        let deltas = def
            .targets
            .iter()
            .map(|&proj| {
                let a = uniform_matrix(&mut rng, def.rank, d_model);
                let b = uniform_matrix(&mut rng, d_model, def.rank);
                (proj, LowRankDelta { a, b })
            })
            .collect();
        Self::new(
            def.adapter_id.clone(),
            deltas,
            def.invocation_tokens.clone(),
            d_model,
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn mode(&self) -> AdapterMode {
        if self.invocation_tokens.is_some() {
            AdapterMode::Activated
        } else {
            AdapterMode::Standard
        }
    }

    pub fn invocation_tokens(&self) -> Option<&[TokenId]> {
        self.invocation_tokens.as_deref()
    }

    pub fn delta(&self, proj: Projection) -> Option<&LowRankDelta> {
        self.deltas[proj.index()].as_ref()
    }

    /// The same weights served as a standard LoRA.
    pub fn as_standard(&self) -> Self {
        Self {
            invocation_tokens: None,
            ..self.clone()
        }
    }
}
