use std::hint::black_box;

use candle_core::{DType, Device};
use criterion::{criterion_group, criterion_main, Criterion};
use hep_core::image::{gaussian_blur, hist_equalize};
use hep_core::metrics::{niqe, ssim};
use hep_core::synth::low_light_pairs;
use hep_core::{LumArchitecture, LumNetwork, NiqeModel};

fn image_ops(c: &mut Criterion) {
    let (low, gt) = low_light_pairs(1, 400, 600, 1).unwrap().remove(0);
    c.bench_function("hist_equalize 400x600", |b| b.iter(|| hist_equalize(black_box(&low)).unwrap()));
    c.bench_function("gaussian_blur sigma 5 400x600", |b| {
        b.iter(|| gaussian_blur(black_box(&low), 5.0).unwrap())
    });
    c.bench_function("ssim 400x600", |b| b.iter(|| ssim(black_box(&low), black_box(&gt)).unwrap()));
}

fn quality(c: &mut Criterion) {
    let (_, gt) = low_light_pairs(1, 400, 600, 2).unwrap().remove(0);
    let model = NiqeModel::shipped();
    let mut g = c.benchmark_group("niqe");
    g.sample_size(10);
    g.bench_function("400x600", |b| b.iter(|| niqe(black_box(&gt), &model).unwrap()));
    g.finish();
}

fn decomposition(c: &mut Criterion) {
    let (low, _) = low_light_pairs(1, 96, 128, 3).unwrap().remove(0);
    let net = LumNetwork::new(LumArchitecture::default(), 0, DType::F32, &Device::Cpu).unwrap();
    let mut g = c.benchmark_group("lum");
    g.sample_size(10);
    g.bench_function("decompose 96x128", |b| b.iter(|| net.decompose(black_box(&low)).unwrap()));
    g.finish();
}

criterion_group!(benches, image_ops, quality, decomposition);
criterion_main!(benches);
