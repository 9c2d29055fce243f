//! Wall-clock benchmarks: end-to-end generation with and without the draft
//! cascade, the matvec kernels the decode loop lives in, and the streaming
//! vocoder path.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use mtpv_bench::{bench_model, bench_prompt, bench_vocoder};
use mtpv_core::decode::{generate, generate_vanilla, SamplerParams, VerifyParams};
use mtpv_core::nn::{matvec_batch, Matrix, RngStream};

fn decode_benches(c: &mut Criterion) {
    let (backbone, cascade) = bench_model();
    let prompt = bench_prompt();
    let sp = SamplerParams { temperature: 0.9, top_k: 16, top_p: None, seed: 7 };
    let vp = VerifyParams { topk_v: 8, eos_topk_v: 1 };

    let mut group = c.benchmark_group("decode");
    group.sample_size(20);
    group.bench_function("accel_64", |b| {
        b.iter(|| generate(&backbone, &cascade, &prompt, 64, &sp, &vp, false).unwrap())
    });
    group.bench_function("vanilla_64", |b| {
        b.iter(|| generate_vanilla(&backbone, &prompt, 64, &sp, false).unwrap())
    });
    group.finish();
}

/// The verification step's whole advantage is that one weight pass serves
/// several positions; batch 3 vs 3x batch 1 makes the saving visible.
fn kernel_benches(c: &mut Criterion) {
    let mut rng = RngStream::new(42);
    let w = Matrix::randn(512, 512, 0.02, &mut rng);
    let xs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..512).map(|_| rng.next_normal()).collect())
        .collect();

    let mut group = c.benchmark_group("matvec");
    group.bench_function("batch1_x3", |b| {
        b.iter(|| {
            for x in &xs {
                black_box(matvec_batch(&w, std::slice::from_ref(x)));
            }
        })
    });
    group.bench_function("batch3", |b| b.iter(|| black_box(matvec_batch(&w, &xs))));
    group.finish();
}

fn vocoder_benches(c: &mut Criterion) {
    let voc = bench_vocoder();
    let tokens: Vec<u32> = {
        let mut rng = RngStream::new(9);
        (0..64).map(|_| rng.next_below(64) as u32).collect()
    };

    let mut group = c.benchmark_group("vocoder");
    group.bench_function("stream_64", |b| {
        b.iter(|| {
            let mut st = voc.new_stream();
            let mut n = 0usize;
            for &t in &tokens {
                n += voc.stream_push(&mut st, t).unwrap().len();
            }
            n += voc.stream_flush(&mut st).unwrap().len();
            black_box(n)
        })
    });
    group.bench_function("offline_64", |b| {
        b.iter(|| black_box(voc.offline_decode(&tokens).unwrap().len()))
    });
    group.finish();
}

criterion_group!(benches, decode_benches, kernel_benches, vocoder_benches);
criterion_main!(benches);
