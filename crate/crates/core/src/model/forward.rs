use super::projection::{apply_adapter_rows, check_adapter_dims};
use super::{
    generate_weights, paged_attention, ActivationMask, AdapterMode, BaseWeights, LoraAdapter,
    ModelConfig, ModelError, Projection,
};
use crate::exec::Exec;
use crate::kv_cache::{BlockId, BlockPool};
use crate::tensor::{add_assign, matmul, rms_norm, silu, vec_mat_into, Matrix};
use crate::TokenId;

/// Positional encodings are scaled to the same order as the embeddings.
const POSITION_SCALE: f32 = 0.1;

/// One request's contribution to a forward step.
#[derive(Debug, Clone, Copy)]
pub struct SeqItem<'a> {
    /// Tokens processed this step, occupying positions `start_pos..`.
    pub tokens: &'a [TokenId],
    pub start_pos: usize,
    /// Must cover `start_pos + tokens.len()` positions.
    pub block_table: &'a [BlockId],
    pub adapter: Option<&'a LoraAdapter>,
}

/// Per-step execution context, set up by the engine before the forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardContext {
    /// One entry per scheduled token across the whole batch. Required when
    /// any item carries an activated adapter.
    pub mask: Option<ActivationMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Logits of each item's last token, in batch order.
    pub logits: Vec<Vec<f32>>,
    /// Total (query, key) pairs scored across heads-collapsed attention.
    pub attended_pairs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub layer: usize,
    pub position: usize,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    weights: BaseWeights,
    exec: Exec,
}

impl Transformer {
    pub fn new(weights: BaseWeights) -> Self {
        Self {
            weights,
            exec: Exec::default(),
        }
    }

    pub fn from_config(config: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Self::new(generate_weights(config)?))
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &BaseWeights {
        &self.weights
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    fn embed(&self, batch: &[SeqItem<'_>], total: usize) -> Result<Matrix, ModelError> {
        let cfg = self.config();
        let d = cfg.d_model;
        let mut x = Matrix::zeros(total, d);
        let mut row = 0;
        for item in batch {
            for (i, &tok) in item.tokens.iter().enumerate() {
                if tok as usize >= cfg.vocab_size {
                    return Err(ModelError::InvalidConfig(format!(
                        "token {tok} outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                let pos = item.start_pos + i;
                let out = x.row_mut(row);
                out.copy_from_slice(self.weights.embedding.row(tok as usize));
                for (j, o) in out.iter_mut().enumerate() {
                    let freq = 1.0 / 10000f32.powf((2 * (j / 2)) as f32 / d as f32);
                    let angle = pos as f32 * freq;
                    let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                    *o += POSITION_SCALE * pe;
                }
                row += 1;
            }
        }
        Ok(x)
    }

    fn validate(
        &self,
        pool: &BlockPool,
        batch: &[SeqItem<'_>],
        ctx: &ForwardContext,
        total: usize,
    ) -> Result<(), ModelError> {
        let cfg = self.config();
        let b = pool.block_size();
        let mut needs_mask = false;
        for item in batch {
            let end = item.start_pos + item.tokens.len();
            if item.tokens.is_empty() {
                return Err(ModelError::InvalidConfig("empty span in batch".into()));
            }
            if end > cfg.max_seq_len {
                return Err(ModelError::SequenceTooLong {
                    position: end - 1,
                    max: cfg.max_seq_len,
                });
            }
            let needed = end.div_ceil(b);
            if item.block_table.len() < needed {
                return Err(ModelError::InsufficientBlocks {
                    needed,
                    have: item.block_table.len(),
                });
            }
            if let Some(adapter) = item.adapter {
                check_adapter_dims(adapter, cfg.d_model)?;
                needs_mask |= adapter.mode() == AdapterMode::Activated;
            }
        }
        if needs_mask {
            let got = ctx.mask.as_ref().map_or(0, |m| m.len());
            if got != total {
                return Err(ModelError::MaskLength { expected: total, got });
            }
        }
        Ok(())
    }

    /// Runs one engine step over a batch of request spans.
    ///
    /// Writes K/V for every scheduled token into the request's blocks and
    /// returns the logits of each span's final token.
    pub fn forward_step(
        &self,
        pool: &mut BlockPool,
        batch: &[SeqItem<'_>],
        ctx: &ForwardContext,
    ) -> Result<ForwardOutput, ModelError> {
        let exec = self.exec;
        let cfg = self.config();
        let total: usize = batch.iter().map(|s| s.tokens.len()).sum();
        self.validate(pool, batch, ctx, total)?;

        let mut ranges = Vec::with_capacity(batch.len());
        let mut start = 0;
        for item in batch {
            ranges.push(start..start + item.tokens.len());
            start += item.tokens.len();
        }
        let mask = ctx.mask.as_ref().map(|m| m.as_slice());
        let b = pool.block_size();

        let mut h = self.embed(batch, total)?;
        for (layer_idx, layer) in self.weights.layers.iter().enumerate() {
            let xn = rms_norm(exec, &h);
            let mut q = matmul(exec, &xn, &layer.wq);
            let mut k = matmul(exec, &xn, &layer.wk);
            let mut v = matmul(exec, &xn, &layer.wv);
            for (item, rows) in batch.iter().zip(&ranges) {
                let Some(adapter) = item.adapter else { continue };
                let blend = match adapter.mode() {
                    AdapterMode::Activated => mask.map(|m| &m[rows.clone()]),
                    AdapterMode::Standard => None,
                };
                for (proj, out) in [
                    (Projection::Q, &mut q),
                    (Projection::K, &mut k),
                    (Projection::V, &mut v),
                ] {
                    apply_adapter_rows(exec, out, &xn, rows.clone(), adapter, proj, blend);
                }
            }

            let mut attn = Matrix::zeros(total, cfg.d_model);
            for (item, rows) in batch.iter().zip(&ranges) {
                let out = paged_attention(
                    exec,
                    &q.slice_rows(rows.start, rows.end),
                    pool,
                    layer_idx,
                    item.block_table,
                    &k.slice_rows(rows.start, rows.end),
                    &v.slice_rows(rows.start, rows.end),
                    item.start_pos,
                    cfg.n_heads,
                )?;
                attn.as_mut_slice()[rows.start * cfg.d_model..rows.end * cfg.d_model]
                    .copy_from_slice(out.as_slice());
            }
            for (item, rows) in batch.iter().zip(&ranges) {
                for (i, r) in rows.clone().enumerate() {
                    let pos = item.start_pos + i;
                    pool.write_kv(item.block_table[pos / b], layer_idx, pos % b, k.row(r), v.row(r));
                }
            }

            add_assign(&mut h, &matmul(exec, &attn, &layer.wo));
            let xn = rms_norm(exec, &h);
            let mut up = matmul(exec, &xn, &layer.w_up);
            up.as_mut_slice().iter_mut().for_each(|x| *x = silu(*x));
            add_assign(&mut h, &matmul(exec, &up, &layer.w_down));
        }

        let last_rows = Matrix::from_vec(
            batch.len(),
            cfg.d_model,
            ranges.iter().flat_map(|r| h.row(r.end - 1).to_vec()).collect(),
        );
        let last_rows = rms_norm(exec, &last_rows);
        let logits = (0..batch.len())
            .map(|i| {
                let mut out = vec![0.0; cfg.vocab_size];
                vec_mat_into(last_rows.row(i), &self.weights.unembedding, &mut out);
                out
            })
            .collect();
        let attended_pairs = batch
            .iter()
            .map(|s| {
                let n = s.tokens.len() as u64;
                n * s.start_pos as u64 + n * (n + 1) / 2
            })
            .sum::<u64>()
            * cfg.n_layers as u64;
        Ok(ForwardOutput {
            logits,
            attended_pairs,
        })
    }

    /// Reads the cached K/V of one position.
    pub fn kv_entry(
        &self,
        pool: &BlockPool,
        block_table: &[BlockId],
        layer: usize,
        position: usize,
    ) -> Result<KvEntry, ModelError> {
        pool.ensure_readable(block_table, position + 1)
            .map_err(|e| ModelError::Consistency(e.to_string()))?;
        let b = pool.block_size();
        let id = block_table[position / b];
        Ok(KvEntry {
            layer,
            position,
            key: pool.key(id, layer, position % b).to_vec(),
            value: pool.value(id, layer, position % b).to_vec(),
        })
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn greedy_next_token(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}
