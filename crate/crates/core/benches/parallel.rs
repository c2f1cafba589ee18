//! Thread-pool versus single-thread timings of the data-parallel kernels.
//! Run with `--no-default-features` to time the sequential build instead.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fmnet_core::blocks::{Mfm, MfmConfig};
use fmnet_core::conv::{conv2d_forward, Conv2dParams};
use fmnet_core::fft::fft2;
use fmnet_core::loss::pyramid_loss;
use fmnet_core::model::{FmNet, ModelConfig};
use fmnet_core::nn::{seeded_rng, Init, ParamStore};
use fmnet_core::{par, ComplexTensor, Tape, Tensor};

/// Runs `f` under the default pool and pinned to one thread.
fn both<F: Fn() + Sync + Send>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10).measurement_time(Duration::from_secs(3));
    g.bench_function(BenchmarkId::new("pool", par::num_threads()), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("single", 1), |b| b.iter(|| par::sequential(&f)));
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = seeded_rng(0);
    let x = Tensor::uniform(&[2, 32, 64, 64], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[32, 32, 3, 3], -1.0, 1.0, &mut rng);
    let p = Conv2dParams { padding: 1, ..Default::default() };
    both(c, "conv2d_3x3_32ch_64px", || {
        black_box(conv2d_forward(&x, &w, None, &p).unwrap());
    });
}

fn fft(c: &mut Criterion) {
    let x = ComplexTensor::from_real(Tensor::uniform(&[16, 64, 64], -1.0, 1.0, &mut seeded_rng(1)));
    both(c, "fft2_16x64x64", || {
        black_box(fft2(&x).unwrap());
    });
}

fn mfm(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(2);
    let block = Mfm::new(&mut Init::new(&mut store, &mut rng), MfmConfig::with_channels(32)).unwrap();
    let x = Tensor::uniform(&[2, 32, 32, 32], -1.0, 1.0, &mut rng);
    both(c, "mfm_32ch_32px", || {
        let tape = Tape::new();
        let ctx = store.bind(&tape, false);
        black_box(block.forward(&ctx, ctx.input(x.clone())).unwrap().value());
    });
}

fn train_step(c: &mut Criterion) {
    let (net, store) = FmNet::build(ModelConfig::default()).unwrap();
    let mut rng = seeded_rng(3);
    let x = Tensor::uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut rng);
    let gt = Tensor::uniform(&[2, 1, 64, 64], 0.0, 1.0, &mut rng).map(|v| v.round());
    both(c, "model_forward_backward_b2_64px", || {
        let tape = Tape::new();
        let ctx = store.bind(&tape, true);
        let pyr = net.forward(&ctx, ctx.input(x.clone())).unwrap();
        let loss = pyramid_loss(&pyr.logits, &gt).unwrap().total;
        black_box(tape.backward(loss).unwrap());
    });
}

criterion_group!(benches, conv, fft, mfm, train_step);
criterion_main!(benches);
