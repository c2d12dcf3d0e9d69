use criterion::{criterion_group, criterion_main, Criterion};
use negtune_bench::textured_batch;
use negtune_core::metrics::{ms_ssim, ms_ssim_with_grad, psnr, vmaf_neg, vmaf_neg_with_grad, VmafModel};
use std::hint::black_box;

fn metrics(c: &mut Criterion) {
    let r = textured_batch(1, 256, 0.0);
    let d = textured_batch(1, 256, 0.05);
    let neg = VmafModel::neg();
    let mut g = c.benchmark_group("metrics_256");
    g.sample_size(10);
    g.bench_function("psnr", |b| b.iter(|| psnr(black_box(&r), black_box(&d)).unwrap()));
    g.bench_function("ms_ssim", |b| b.iter(|| ms_ssim(black_box(&r), black_box(&d)).unwrap()));
    g.bench_function("ms_ssim_grad", |b| {
        b.iter(|| ms_ssim_with_grad(black_box(&r), black_box(&d)).unwrap())
    });
    g.bench_function("vmaf_neg", |b| b.iter(|| vmaf_neg(black_box(&r), black_box(&d), &neg).unwrap()));
    g.bench_function("vmaf_neg_grad", |b| {
        b.iter(|| vmaf_neg_with_grad(black_box(&r), black_box(&d), &neg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, metrics);
criterion_main!(benches);
