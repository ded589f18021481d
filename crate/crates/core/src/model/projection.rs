use std::ops::Range;

use super::{ActivationMask, AdapterMode, LayerWeights, LoraAdapter, ModelError, Projection};
use crate::exec::Exec;
use crate::tensor::{matmul, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Q/K/V projections with an optional adapter.
///
/// Standard adapters apply to every row. Activated adapters blend per row:
/// `base * mask + adapted * (1 - mask)`, so masked rows (pre-invocation)
/// come out exactly equal to the base projection.
pub fn project_qkv_masked(
    exec: Exec,
    x: &Matrix,
    layer: &LayerWeights,
    adapter: Option<&LoraAdapter>,
    mask: &ActivationMask,
) -> Result<Qkv, ModelError> {
    let d_model = layer.wq.rows();
    if x.cols() != d_model {
        return Err(ModelError::InvalidConfig(format!(
            "input width {} != d_model {d_model}",
            x.cols()
        )));
    }
    if let Some(adapter) = adapter {
        check_adapter_dims(adapter, d_model)?;
        if adapter.mode() == AdapterMode::Activated && mask.len() != x.rows() {
            return Err(ModelError::MaskLength {
                expected: x.rows(),
                got: mask.len(),
            });
        }
    }
    let project = |proj: Projection, w: &Matrix| {
        let mut out = matmul(exec, x, w);
        if let Some(adapter) = adapter {
            let blend = (adapter.mode() == AdapterMode::Activated).then(|| mask.as_slice());
            apply_adapter_rows(exec, &mut out, x, 0..x.rows(), adapter, proj, blend);
        }
        out
    };
    Ok(Qkv {
        q: project(Projection::Q, &layer.wq),
        k: project(Projection::K, &layer.wk),
        v: project(Projection::V, &layer.wv),
    })
}

pub(crate) fn check_adapter_dims(adapter: &LoraAdapter, d_model: usize) -> Result<(), ModelError> {
    for proj in Projection::ALL {
        if let Some(delta) = adapter.delta(proj) {
            if delta.a.cols() != d_model || delta.b.rows() != d_model {
                return Err(ModelError::AdapterConfig {
                    adapter: adapter.id().to_string(),
                    detail: format!("{proj:?} delta does not match d_model {d_model}"),
                });
            }
        }
    }
    Ok(())
}

/// Adds the adapter delta to `out[rows]` in place. With `blend` set, each row
/// is then recombined with its pre-adapter value according to the mask entry
/// (`blend[i]` belongs to row `rows.start + i`).
pub(crate) fn apply_adapter_rows(
    exec: Exec,
    out: &mut Matrix,
    x: &Matrix,
    rows: Range<usize>,
    adapter: &LoraAdapter,
    proj: Projection,
    blend: Option<&[bool]>,
) {
    let Some(delta) = adapter.delta(proj) else {
        return;
    };
    let width = out.cols();
    let start = rows.start;
    let segment = &mut out.as_mut_slice()[rows.start * width..rows.end * width];
    exec.for_each_row(segment, width, |i, row| {
        let base_output = row.to_vec();
        delta.add_to_row(x.row(start + i), row);
        if let Some(mask) = blend {
            let m = if mask[i] { 1.0f32 } else { 0.0f32 };
            for (o, b) in row.iter_mut().zip(&base_output) {
                *o = b * m + *o * (1.0 - m);
            }
        }
    });
}
