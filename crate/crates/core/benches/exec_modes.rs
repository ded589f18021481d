use std::hint::black_box;

use alora_serve::tensor::Matrix;
use alora_serve::{
    paged_attention, tensor, ActivationMask, AdapterDefinition, BlockPool, Exec, ForwardContext,
    LoraAdapter, ModelConfig, Projection, SeqItem, Transformer,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn label(exec: Exec) -> &'static str {
    match exec {
        Exec::Sequential => "sequential",
        #[cfg(feature = "parallel")]
        Exec::Parallel => "parallel",
    }
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_256x64x256");
    let a = Matrix::from_fn(256, 64, |i, j| ((i * 3 + j) % 17) as f32 * 0.01);
    let b = Matrix::from_fn(64, 256, |i, j| ((i + j * 5) % 13) as f32 * 0.01);
    for exec in Exec::available() {
        g.bench_function(BenchmarkId::from_parameter(label(exec)), |bench| {
            bench.iter(|| tensor::matmul(exec, black_box(&a), black_box(&b)))
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("paged_attention_ctx1024_q64");
    let (d, heads, bs, ctx, n) = (64, 4, 16, 1024, 64);
    let mut pool = BlockPool::new((ctx + n) / bs + 1, bs, 1, d);
    let table = pool.allocate((ctx + n).div_ceil(bs)).unwrap();
    let row: Vec<f32> = (0..d).map(|i| (i as f32 * 0.1).sin()).collect();
    for p in 0..ctx {
        pool.write_kv(table[p / bs], 0, p % bs, &row, &row);
    }
    let q = Matrix::from_fn(n, d, |i, j| ((i + j) % 7) as f32 * 0.1);
    for exec in Exec::available() {
        g.bench_function(BenchmarkId::from_parameter(label(exec)), |bench| {
            bench.iter(|| paged_attention(exec, &q, &pool, 0, &table, &q, &q, ctx, heads).unwrap())
        });
    }
    g.finish();
}

fn prefill(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_prefill_256_alora");
    g.sample_size(20);
    let cfg = ModelConfig::default();
    let adapter = LoraAdapter::from_definition(
        &AdapterDefinition {
            adapter_id: "a".into(),
            rank: 32,
            seed: 1,
            targets: Projection::ALL.to_vec(),
            invocation_tokens: Some(vec![253, 254, 255]),
        },
        cfg.d_model,
    )
    .unwrap();
    let tokens: Vec<u32> = (0..256).map(|i| (i * 37 % 250) as u32).collect();
    for exec in Exec::available() {
        let model = Transformer::from_config(&cfg).unwrap().with_exec(exec);
        let mut pool = BlockPool::new(64, 4, cfg.n_layers, cfg.d_model);
        let table = pool.allocate(64).unwrap();
        let ctx = ForwardContext {
            mask: Some(ActivationMask::for_span(0, tokens.len(), 200)),
        };
        g.bench_function(BenchmarkId::from_parameter(label(exec)), |bench| {
            bench.iter(|| {
                let item = SeqItem {
                    tokens: &tokens,
                    start_pos: 0,
                    block_table: &table,
                    adapter: Some(&adapter),
                };
                model.forward_step(&mut pool, &[item], &ctx).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, attention, prefill);
criterion_main!(benches);
