use alora_serve::{
    generate_weights, project_qkv_masked, ActivationMask, AdapterDefinition, AdapterMode, Exec,
    LoraAdapter, ModelConfig, Projection,
};
use alora_serve::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-at-a-time reference: base projection, low-rank delta, then pick base
/// for masked rows and adapted for the rest.
fn oracle(x: &Matrix, w: &Matrix, adapter: &LoraAdapter, proj: Projection, mask: &[bool]) -> Vec<f32> {
    let d = w.cols();
    let mut out = Vec::with_capacity(x.rows() * d);
    for i in 0..x.rows() {
        let xr = x.row(i);
        for j in 0..d {
            let mut base = 0.0f32;
            for (k, &xk) in xr.iter().enumerate() {
                base += xk * w.row(k)[j];
            }
            let value = match adapter.delta(proj) {
                None => base,
                Some(delta) => {
                    let mut expanded = 0.0f32;
                    for r in 0..delta.rank() {
                        let mut shrunk = 0.0f32;
                        for (k, &xk) in xr.iter().enumerate() {
                            shrunk += xk * delta.b.row(k)[r];
                        }
                        expanded += shrunk * delta.a.row(r)[j];
                    }
                    let adapted = base + expanded;
                    let activated = adapter.mode() == AdapterMode::Standard || !mask[i];
                    if activated { adapted } else { base }
                }
            };
            out.push(value);
        }
    }
    out
}

#[test]
fn masked_projection_matches_row_oracle_exactly() {
    let cfg = ModelConfig {
        d_model: 32,
        n_heads: 4,
        head_dim: 8,
        ..ModelConfig::default()
    };
    let weights = generate_weights(&cfg).unwrap();
    let layer = &weights.layers[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100u64 {
        let rows = rng.random_range(1..=24);
        let x = Matrix::from_fn(rows, 32, |_, _| rng.random_range(-2.0f32..2.0));
        let mut targets: Vec<Projection> = Projection::ALL
            .into_iter()
            .filter(|_| rng.random_bool(0.7))
            .collect();
        if targets.is_empty() {
            targets.push(Projection::K);
        }
        let def = AdapterDefinition {
            adapter_id: format!("a{trial}"),
            rank: rng.random_range(1..=16),
            seed: trial,
            targets,
            invocation_tokens: Some(vec![1]),
        };
        let adapter = LoraAdapter::from_definition(&def, 32).unwrap();
        let mask: Vec<bool> = match trial % 4 {
            0 => vec![true; rows],
            1 => vec![false; rows],
            2 => {
                let inv = rng.random_range(0..=rows);
                (0..rows).map(|i| i < inv).collect()
            }
            _ => (0..rows).map(|_| rng.random_bool(0.5)).collect(),
        };
        let standard = adapter.as_standard();
        for exec in Exec::available() {
            for a in [&adapter, &standard] {
                let got =
                    project_qkv_masked(exec, &x, layer, Some(a), &ActivationMask::new(mask.clone())).unwrap();
                for (proj, w, out) in [
                    (Projection::Q, &layer.wq, &got.q),
                    (Projection::K, &layer.wk, &got.k),
                    (Projection::V, &layer.wv, &got.v),
                ] {
                    assert_eq!(
                        out.as_slice(),
                        oracle(&x, w, a, proj, &mask).as_slice(),
                        "trial {trial} {proj:?} {:?} {exec:?}",
                        a.mode()
                    );
                }
            }
        }
    }
}
