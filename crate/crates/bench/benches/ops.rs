use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mmt_probe::decode::{translate, DecodeConfig};
use mmt_probe::{FusionMode, PatchFeatures};
use mmt_probe_bench::{batch, filled, model, tiny};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = filled(&[n, n], 1);
        let b = filled(&[n, n], 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_grads");
    g.sample_size(20);
    for mode in FusionMode::ALL {
        let params = model(mode, 64);
        let b = batch(&tiny(mode, 64), 16, 12, 50);
        g.bench_function(mode.to_string(), |bench| {
            bench.iter(|| black_box(params.loss_and_grads(&b, true, 1).unwrap()))
        });
    }
    g.finish();
}

fn decode(c: &mut Criterion) {
    let mut g = c.benchmark_group("decode");
    g.sample_size(20);
    let params = model(FusionMode::SelectiveAttention, 64);
    let feats = PatchFeatures::new("x", filled(&[50, 64], 3), true).unwrap();
    let src: Vec<u32> = (4..16).collect();
    for beam in [1, 5] {
        let cfg = DecodeConfig {
            beam,
            max_out_len: 20,
        };
        g.bench_with_input(BenchmarkId::new("beam", beam), &beam, |bench, _| {
            bench.iter(|| black_box(translate(&params, &src, Some(&feats), &cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, train_step, decode);
criterion_main!(benches);
