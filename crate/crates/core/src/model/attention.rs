use super::ModelError;
use crate::exec::Exec;
use crate::kv_cache::{BlockId, BlockPool};
use crate::tensor::{dot, Matrix};

/// Causal multi-head attention for `queries` at positions
/// `causal_offset..causal_offset + n`. Keys/values for positions before
/// `causal_offset` are read from the pool through `block_table`; the rest come
/// from `fresh_k`/`fresh_v`, row `i` belonging to position `causal_offset + i`.
#[allow(clippy::too_many_arguments)]
pub fn paged_attention(
    exec: Exec,
    queries: &Matrix,
    pool: &BlockPool,
    layer: usize,
    block_table: &[BlockId],
    fresh_k: &Matrix,
    fresh_v: &Matrix,
    causal_offset: usize,
    n_heads: usize,
) -> Result<Matrix, ModelError> {
    let d = queries.cols();
    let n = queries.rows();
    if fresh_k.shape() != (n, d) || fresh_v.shape() != (n, d) || !d.is_multiple_of(n_heads) {
        return Err(ModelError::InvalidConfig(format!(
            "attention shapes: queries {:?}, fresh k {:?}, fresh v {:?}, heads {n_heads}",
            queries.shape(),
            fresh_k.shape(),
            fresh_v.shape()
        )));
    }
    pool.ensure_readable(block_table, causal_offset)
        .map_err(|e| ModelError::Consistency(e.to_string()))?;

    let b = pool.block_size();
    let cached: Vec<(&[f32], &[f32])> = (0..causal_offset)
        .map(|p| {
            let id = block_table[p / b];
            (pool.key(id, layer, p % b), pool.value(id, layer, p % b))
        })
        .collect();
    let kv_at = |p: usize| -> (&[f32], &[f32]) {
        if p < causal_offset {
            cached[p]
        } else {
            (fresh_k.row(p - causal_offset), fresh_v.row(p - causal_offset))
        }
    };

    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut out = Matrix::zeros(n, d);
    exec.for_each_row(out.as_mut_slice(), d, |i, out_row| {
        let n_ctx = causal_offset + i + 1;
        let q_row = queries.row(i);
        // Position-major so each cached row is read once per query.
        let mut scores = vec![0.0f32; n_ctx * n_heads];
        let mut max = vec![f32::NEG_INFINITY; n_heads];
        for (p, s) in scores.chunks_exact_mut(n_heads).enumerate() {
            let k = kv_at(p).0;
            for h in 0..n_heads {
                let r = h * head_dim..(h + 1) * head_dim;
                s[h] = dot(&q_row[r.clone()], &k[r]) * scale;
                max[h] = max[h].max(s[h]);
            }
        }
        let mut denom = vec![0.0f32; n_heads];
        for s in scores.chunks_exact_mut(n_heads) {
            for h in 0..n_heads {
                s[h] = (s[h] - max[h]).exp();
                denom[h] += s[h];
            }
        }
        for (p, w) in scores.chunks_exact(n_heads).enumerate() {
            let v = kv_at(p).1;
            for h in 0..n_heads {
                let r = h * head_dim..(h + 1) * head_dim;
                for (a, &vv) in out_row[r.clone()].iter_mut().zip(&v[r]) {
                    *a += w[h] * vv;
                }
            }
        }
        for h in 0..n_heads {
            let inv = 1.0 / denom[h];
            out_row[h * head_dim..(h + 1) * head_dim].iter_mut().for_each(|a| *a *= inv);
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_returns_its_value() {
        let pool = BlockPool::new(1, 4, 1, 8);
        let q = Matrix::from_fn(1, 8, |_, j| j as f32 * 0.3);
        let k = Matrix::from_fn(1, 8, |_, j| 1.0 - j as f32 * 0.1);
        let v = Matrix::from_fn(1, 8, |_, j| j as f32 - 4.0);
        let out = paged_attention(Exec::Sequential, &q, &pool, 0, &[], &k, &v, 0, 2).unwrap();
        for (a, b) in out.as_slice().iter().zip(v.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unpinned_block_read_is_rejected() {
        let pool = BlockPool::new(2, 4, 1, 8);
        let q = Matrix::zeros(1, 8);
        let err = paged_attention(Exec::Sequential, &q, &pool, 0, &[BlockId(0)], &q, &q, 3, 2)
            .unwrap_err();
        assert!(matches!(err, ModelError::Consistency(_)));
    }
}
