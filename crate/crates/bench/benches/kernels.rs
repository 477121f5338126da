//! Hot-path benchmarks: the per-step gradient kernel, importance
//! estimation, dampening, and the raw convolution.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use unlearn_core::data::{generate_dataset, GenConfig, SampleSet};
use unlearn_core::fisher::fim_diag;
use unlearn_core::methods::{ssd_dampen, SsdImportances};
use unlearn_core::model::{build_model, Arch, Model};
use unlearn_core::tensor::{conv2d, ConvDims};
use unlearn_core::train::{forward_backward, LossSpec};

fn bench_gen() -> GenConfig {
    GenConfig { train: 512, val: 64, test: 64, ..GenConfig::default() }
}

fn cnn_and_data() -> (Model, SampleSet) {
    let arch = Arch::Cnn { in_ch: 1, h: 16, w: 16, c1: 8, c2: 16, num_classes: 10 };
    let model = build_model(&arch, 0).unwrap();
    let data = generate_dataset(&bench_gen(), 0).unwrap();
    (model, data.train)
}

fn step_gradient(c: &mut Criterion) {
    let (model, train) = cnn_and_data();
    let (inputs, labels) = train.all();
    let batch = unlearn_core::Tensor::new(
        vec![128, train.channels, train.height, train.width],
        inputs.data()[..128 * 256].to_vec(),
    )
    .unwrap();
    c.bench_function("forward_backward_cnn_batch128", |b| {
        b.iter(|| {
            forward_backward(
                black_box(&model),
                black_box(&batch),
                black_box(&labels[..128]),
                &LossSpec::CrossEntropy,
            )
            .unwrap()
        })
    });
}

fn importance(c: &mut Criterion) {
    let (model, train) = cnn_and_data();
    let mut group = c.benchmark_group("fim_diag");
    group.sample_size(10);
    group.bench_function("cnn_200_samples", |b| {
        let subset = SampleSet::new(
            train.channels,
            train.height,
            train.width,
            train.all().0.data()[..200 * 256].to_vec(),
            train.labels()[..200].to_vec(),
        )
        .unwrap();
        b.iter(|| fim_diag(black_box(&model), black_box(&subset)).unwrap())
    });
    group.finish();
}

fn dampening(c: &mut Criterion) {
    let (model, _) = cnn_and_data();
    let n = model.num_params();
    let imp = SsdImportances {
        train_imp: (0..n).map(|i| 1.0 + (i % 17) as f64).collect(),
        forget_imp: (0..n).map(|i| 1.0 + (i % 23) as f64).collect(),
        seconds: 0.0,
    };
    c.bench_function("ssd_dampen_full_model", |b| {
        b.iter(|| ssd_dampen(black_box(&model), black_box(&imp), 1.0, 1.0).unwrap())
    });
}

fn convolution(c: &mut Criterion) {
    let d = ConvDims { batch: 32, in_ch: 8, out_ch: 16, h: 16, w: 16, kh: 3, kw: 3, pad: 1 };
    let input: Vec<f64> = (0..d.batch * d.in_ch * d.h * d.w).map(|i| (i % 7) as f64 * 0.1).collect();
    let weight: Vec<f64> =
        (0..d.out_ch * d.in_ch * d.kh * d.kw).map(|i| (i % 5) as f64 * 0.01).collect();
    let bias = vec![0.0; d.out_ch];
    c.bench_function("conv2d_32x8x16x16_to_16ch", |b| {
        b.iter(|| conv2d(black_box(&input), black_box(&weight), black_box(&bias), &d))
    });
}

criterion_group!(kernels, step_gradient, importance, dampening, convolution);
criterion_main!(kernels);
