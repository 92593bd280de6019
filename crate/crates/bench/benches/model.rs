use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fesnet_core::data::synthetic_fundus;
use fesnet_core::model::{FesNet, ModelConfig};
use fesnet_core::nn::{Adam, Layer, Mode};
use fesnet_core::rng::seeded;
use fesnet_core::train::{init_model, train_step};
use fesnet_core::Tensor;

fn forward(c: &mut Criterion) {
    let mut model: FesNet<f32> = init_model(ModelConfig::default(), 0).unwrap();
    let mut group = c.benchmark_group("fesnet forward");
    group.sample_size(10);
    for size in [64, 160] {
        let x = Tensor::<f32>::randn(&[1, 3, size, size], 1.0, &mut seeded(1));
        group.bench_with_input(BenchmarkId::from_parameter(size), &x, |b, x| {
            b.iter(|| model.forward(black_box(x), Mode::Inference).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut model: FesNet<f32> = init_model(ModelConfig::default(), 0).unwrap();
    let mut adam = Adam::new();
    let crops: Vec<_> = (0..4).map(|i| synthetic_fundus(&format!("b{i}"), 64, 64, i)).collect();
    let mut group = c.benchmark_group("train step");
    group.sample_size(10);
    let mut step = 0;
    group.bench_function("batch 4 x 64x64", |b| {
        b.iter(|| {
            step += 1;
            train_step(&mut model, &mut adam, black_box(&crops), 1e-5, step).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, forward, training_step);
criterion_main!(benches);
