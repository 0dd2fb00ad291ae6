use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lsat_bench::input;
use lsat_core::data::{generate_range, SynthConfig};
use lsat_core::network::{LsatConfig, LsatModel};
use lsat_core::profile::count_flops;
use lsat_core::train::{batch_gradients, LossConfig};

fn predict(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict_logits");
    group.sample_size(20);
    for (name, cfg) in [("tiny", LsatConfig::tiny()), ("toy", LsatConfig::toy())] {
        let model = LsatModel::<f32>::new(cfg.clone(), 0).unwrap();
        let (xa, xb) = (
            input(&[1, 3, cfg.tile, cfg.tile], 1),
            input(&[1, 3, cfg.tile, cfg.tile], 2),
        );
        group.bench_function(name, |b| b.iter(|| black_box(model.predict_logits(&xa, &xb).unwrap())));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut model = LsatModel::<f32>::new(LsatConfig::toy(), 0).unwrap();
    let samples = generate_range(&SynthConfig::default(), 0, 2).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    let loss = LossConfig::default();
    let mut group = c.benchmark_group("toy_gradients");
    group.sample_size(10);
    group.bench_function("batch_of_2", |b| {
        b.iter(|| black_box(batch_gradients(&mut model, &batch, &loss).unwrap()))
    });
    group.finish();
}

fn profiler(c: &mut Criterion) {
    let cfg = LsatConfig::default();
    c.bench_function("count_flops_default_256", |b| {
        b.iter(|| black_box(count_flops(&cfg, 256, 1).unwrap()))
    });
}

criterion_group!(benches, predict, train_step, profiler);
criterion_main!(benches);
