use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fesnet_core::nn::{conv2d, depthwise_separable_conv, transposed_conv2d, ConvSpec};
use fesnet_core::rng::seeded;
use fesnet_core::Tensor;

fn convolutions(c: &mut Criterion) {
    let mut rng = seeded(0);
    let mut group = c.benchmark_group("conv");
    for size in [64, 128] {
        let x = Tensor::<f32>::randn(&[1, 16, size, size], 1.0, &mut rng);
        let spec = ConvSpec::same(16, 16, 3);
        let w = Tensor::<f32>::randn(&spec.weight_shape(), 0.1, &mut rng);
        let b = Tensor::<f32>::zeros(&[16]);
        group.bench_with_input(BenchmarkId::new("conv2d 3x3 16->16", size), &x, |bench, x| {
            bench.iter(|| conv2d(black_box(x), &w, &b, &spec).unwrap())
        });

        let wd = Tensor::<f32>::randn(&[16, 1, 3, 3], 0.1, &mut rng);
        let wp = Tensor::<f32>::randn(&[16, 16, 1, 1], 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::new("separable 3x3 16->16", size), &x, |bench, x| {
            bench.iter(|| depthwise_separable_conv(black_box(x), &wd, &b, &wp, &b).unwrap())
        });

        let xs = Tensor::<f32>::randn(&[1, 16, size / 4, size / 4], 1.0, &mut rng);
        let wt = Tensor::<f32>::randn(&[16, 16, 4, 4], 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::new("transposed k4 s4 16->16", size), &xs, |bench, x| {
            bench.iter(|| transposed_conv2d(black_box(x), &wt, &b, 4).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, convolutions);
criterion_main!(benches);
