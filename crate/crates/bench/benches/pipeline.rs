use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hsfusion::{kernels, metrics, FusionConfig, HyperCube, SelfRegState};
use hsfusion_bench::scene;

fn training_step(c: &mut Criterion) {
    let s = scene(32, 8, 3, 4);
    let config = FusionConfig::desk();
    let mut state = SelfRegState::new(config.clone(), &s.y, &s.z).unwrap();
    c.bench_function("three_stage_forward desk 32x32x8", |b| {
        b.iter(|| state.three_stage_forward(black_box(&s.y), black_box(&s.z)).unwrap())
    });
    let mut state = SelfRegState::new(config, &s.y, &s.z).unwrap();
    c.bench_function("train step desk 32x32x8", |b| {
        b.iter(|| state.step(black_box(&s.y), black_box(&s.z)).unwrap())
    });
}

fn scoring(c: &mut Criterion) {
    let s = scene(64, 16, 3, 4);
    let up = HyperCube::from_tensor(&kernels::upsample_bilinear(&s.y.to_tensor(), 4).unwrap()).unwrap();
    c.bench_function("evaluate 64x64x16", |b| {
        b.iter(|| metrics::evaluate(black_box(&up), black_box(&s.x), 4).unwrap())
    });
}

criterion_group!(benches, training_step, scoring);
criterion_main!(benches);
