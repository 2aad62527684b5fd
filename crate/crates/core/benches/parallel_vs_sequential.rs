//! Rayon row-parallel kernels against the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tsp_core::reference::kernels::gemm;
use tsp_core::reference::{encoder_stack_ref, generate_model, ModelDims};
use tsp_core::Exec;

fn bench_gemm(c: &mut Criterion) {
    let m = generate_model(ModelDims::bert_base(), 1, 1).unwrap();
    let p = &m.layers[0];
    let mut g = c.benchmark_group("gemm_128x768x3072");
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| gemm(black_box(&m.input), &p.w1, Some(&p.b1), e).unwrap())
        });
    }
    g.finish();
}

fn bench_layer(c: &mut Criterion) {
    let m = generate_model(ModelDims::bert_base(), 1, 2).unwrap();
    let mut g = c.benchmark_group("bert_base_layer");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| encoder_stack_ref(black_box(&m), e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_gemm, bench_layer);
criterion_main!(benches);
