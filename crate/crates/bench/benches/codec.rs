use criterion::{criterion_group, criterion_main, Criterion};
use negtune_bench::textured_batch;
use negtune_core::codec::{code_image, CodecConfig, CodecModel, FreezeSpec, Likelihoods};
use std::hint::black_box;

fn codec(c: &mut Criterion) {
    let img = textured_batch(1, 256, 0.0);
    let x = img.image(0).mapv(|v| v as f32);
    let mut model = CodecModel::new(CodecConfig::default()).unwrap();
    // Backward only accumulates gradients, so a copy can run the forward passes.
    let fwd = model.clone();
    let mut g = c.benchmark_group("codec_256");
    g.sample_size(10);
    g.bench_function("code_image", |b| b.iter(|| code_image(&model, black_box(&img)).unwrap()));
    g.bench_function("forward_train", |b| b.iter(|| model.forward_train(black_box(&x), 1).unwrap()));
    for spec in [FreezeSpec::None, FreezeSpec::DecoderOnly] {
        g.bench_function(format!("backward_{spec}"), |b| {
            b.iter_batched(
                || fwd.forward_train(&x, 1).unwrap(),
                |(rec, trace)| {
                    let g_lik = Likelihoods {
                        y: trace.likelihoods.y.mapv(|_| -1.0),
                        z: trace.likelihoods.z.mapv(|_| -1.0),
                    };
                    let g_rec = rec.mapv(|_| 1e-3f32);
                    model.backward(trace, &g_rec, &g_lik, spec);
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
