//! Parallel vs. sequential timings of the hot kernels and one training step.
//! Both paths produce bit-identical results; only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use recal_core::model::{Model, ModelConfig, Variant};
use recal_core::ops::conv::conv2d_forward;
use recal_core::ops::pool::avg_pool_forward;
use recal_core::ops::ConvSpec;
use recal_core::par;
use recal_core::synth::augment::{augment, AugmentKind};
use recal_core::synth::{generate, PhantomClass, PhantomSpec};
use recal_core::train::loss::LossConfig;
use recal_core::train::{train_step, TrainConfig};
use recal_core::Tensor4;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn wave(shape: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(shape, |[n, c, y, x]| ((n * 31 + c * 17 + y * 7 + x * 3) % 23) as f64 / 23.0 - 0.5)
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3_32to32_64px");
    let spec = ConvSpec::new(32, 32, 3).padding(1, 1).without_bias();
    let x = wave([8, 32, 64, 64]);
    let w = wave(spec.weight_shape());
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| b.iter(|| conv2d_forward(&x, &w, None, &spec).unwrap()));
    }
    par::set_parallel(true);
    g.finish();
}

fn grouped_fusion(c: &mut Criterion) {
    let mut g = c.benchmark_group("grouped_fusion_64ch_32px");
    let spec = ConvSpec::new(128, 64, 3).padding(1, 1).groups(64).without_bias();
    let x = wave([8, 128, 32, 32]);
    let w = wave(spec.weight_shape());
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| b.iter(|| conv2d_forward(&x, &w, None, &spec).unwrap()));
    }
    par::set_parallel(true);
    g.finish();
}

fn pool(c: &mut Criterion) {
    let mut g = c.benchmark_group("avg_pool7_stride1");
    let x = wave([8, 32, 64, 64]);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| b.iter(|| avg_pool_forward(&x, (7, 7), 1).unwrap()));
    }
    par::set_parallel(true);
    g.finish();
}

fn augmentation(c: &mut Criterion) {
    let mut g = c.benchmark_group("augment_32_samples");
    let data = generate(&PhantomSpec::new(PhantomClass::Iris, (64, 64), 0), 32).unwrap();
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| b.iter(|| augment(&data, &AugmentKind::ALL, 1).unwrap()));
    }
    par::set_parallel(true);
    g.finish();
}

fn step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step_w8_64px_batch4");
    g.sample_size(10);
    let data = generate(&PhantomSpec::new(PhantomClass::Pupil, (64, 64), 0), 4).unwrap();
    let cfg = TrainConfig::default();
    for variant in [Variant::Baseline, Variant::ReCal] {
        for (name, on) in MODES {
            par::set_parallel(on);
            let mut model = Model::build(ModelConfig::new(variant, 8, (64, 64)), 0).unwrap();
            g.bench_with_input(BenchmarkId::new(variant.name(), name), &data, |b, d| {
                b.iter(|| train_step(&mut model, &d.images, &d.masks, 1e-4, &cfg, LossConfig::default()).unwrap())
            });
        }
    }
    par::set_parallel(true);
    g.finish();
}

criterion_group!(benches, conv, grouped_fusion, pool, augmentation, step);
criterion_main!(benches);
