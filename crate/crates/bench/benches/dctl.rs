use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dctl::conv::{conv_same, CoefficientStack, KernelBank, Sample};
use dctl::data::{generate_synthetic, normalize_dataset, SynthSpec};
use dctl::model::{forward_layer, train, ModelConfig};
use dctl::prox::{
    projected_newton_coeffs, update_transform, CoefficientProblem, Coupling, NewtonSettings, TransformUpdateInputs,
};
use nalgebra::DMatrix;
use std::hint::black_box;

fn samples(per_class: usize, length: usize) -> Vec<Sample> {
    let mut ds = generate_synthetic(&SynthSpec {
        per_class,
        length,
        ..Default::default()
    })
    .unwrap();
    normalize_dataset(&mut ds);
    ds.samples
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv_same");
    for n in [64, 256, 1024] {
        let signal: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let kernel: Vec<f64> = (0..8).map(|j| 1.0 / (1.0 + j as f64)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &signal, |b, s| {
            b.iter(|| conv_same(black_box(s), black_box(&kernel)).unwrap())
        });
    }
    group.finish();
}

fn bench_transform(c: &mut Criterion) {
    let mut group = c.benchmark_group("update_transform");
    for k in [4, 8, 16] {
        let a = DMatrix::from_fn(k, k, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        let inputs = TransformUpdateInputs {
            gram: &a * a.transpose() + DMatrix::identity(k, k),
            cross: a.clone(),
            anchor: DMatrix::identity(k, k),
            mu: 0.01,
            lambda: 0.01,
            gamma1: 1.0,
        };
        group.bench_with_input(BenchmarkId::from_parameter(k), &inputs, |b, inputs| {
            b.iter(|| update_transform(black_box(inputs)).unwrap())
        });
    }
    group.finish();
}

fn bench_newton(c: &mut Criterion) {
    let data = samples(4, 64);
    let bank = KernelBank::identity(8);
    let forward = forward_layer(&data, None, &bank).unwrap();
    let next = forward_layer(&data, Some(&forward), &bank).unwrap();
    let anchor = CoefficientStack::zeros(data.len(), 64, 8);
    let problem = CoefficientProblem {
        forward: &forward,
        anchor: &anchor,
        coupling: Some(Coupling {
            next_transform: &bank,
            next_coeffs: &next,
        }),
        beta: 0.01,
        gamma2: 1.0,
    };
    let settings = NewtonSettings::default();
    c.bench_function("projected_newton/M12_N64_K8", |b| {
        b.iter(|| projected_newton_coeffs(black_box(&anchor), &problem, &settings).unwrap())
    });
}

fn bench_train(c: &mut Criterion) {
    let data = samples(10, 32);
    let config = ModelConfig {
        num_layers: 2,
        num_kernels: 4,
        max_outer_iters: 10,
        objective_tol: 0.0,
        ..Default::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("M30_N32_K4_L2_10iters", |b| b.iter(|| train(black_box(&data), &config).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_conv, bench_transform, bench_newton, bench_train);
criterion_main!(benches);
