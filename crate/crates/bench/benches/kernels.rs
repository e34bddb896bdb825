use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use stylefuse::inversion::objective_gradient;
use stylefuse::kernels::conv2d;
use stylefuse::metrics::ssim;
use stylefuse::{Distance, Generator, GeneratorConfig, StyleVector, Tensor};

fn bench_conv(c: &mut Criterion) {
    let x = Tensor::from_fn([64, 32, 32], |i| ((i * 7919) % 101) as f64 / 101.0);
    let k = Tensor::from_fn([32, 64, 3, 3], |i| ((i * 104729) % 31) as f64 / 31.0 - 0.5);
    let b = Tensor::zeros([32]);
    c.bench_function("conv2d 64->32 3x3 32x32", |bench| {
        bench.iter(|| conv2d(black_box(&x), &k, &b, 1).unwrap())
    });
}

fn bench_generator(c: &mut Criterion) {
    let gen = Generator::seeded(GeneratorConfig::desk(), 0).unwrap();
    let s = StyleVector::random(8, 64, 1);
    c.bench_function("synthesize desk", |bench| {
        bench.iter(|| gen.synthesize(black_box(&s)).unwrap())
    });

    let target = gen.synthesize(&StyleVector::random(8, 64, 2)).unwrap();
    let dist = Distance::l2();
    let prepared = dist.prepare(&target).unwrap();
    c.bench_function("inversion step desk l2", |bench| {
        bench.iter(|| objective_gradient(&gen, &dist, &prepared, black_box(s.tensor())).unwrap())
    });
}

fn bench_ssim(c: &mut Criterion) {
    let a = Tensor::from_fn([3, 64, 64], |i| ((i * 31) % 97) as f64 / 97.0);
    let b = a.map(|v| (v * 0.9 + 0.05).min(1.0));
    c.bench_function("ssim 3x64x64", |bench| {
        bench.iter(|| ssim(black_box(&a), &b).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_conv, bench_generator, bench_ssim
}
criterion_main!(benches);
