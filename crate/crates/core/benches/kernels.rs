//! Sequential vs data-parallel kernels. Run with `cargo bench -p bench500-core`.

use std::collections::BTreeMap;

use bench500::graph::{inference_and_backprop, Events};
use bench500::models;
use bench500::operators::{ConvAttrs, OpKind, Operator};
use bench500::par;
use bench500::{DType, Rng, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Tensor::from_f64_values(DType::F32, shape.to_vec(), &v)
}

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn gemm(c: &mut Criterion) {
    let mut rng = Rng::new(0, 0);
    let a = random(&mut rng, &[512, 512]);
    let b = random(&mut rng, &[512, 64]);
    let mut group = c.benchmark_group("gemm_512x512x64");
    for (mode, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(mode), |bench| {
            bench.iter(|| OpKind::Gemm.forward(&[&a, &b]).unwrap())
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(1, 0);
    let x = random(&mut rng, &[8, 3, 64, 64]);
    let w = random(&mut rng, &[16, 3, 3, 3]);
    let op = OpKind::Conv(ConvAttrs::new([3, 3]).with_pads([1, 1, 1, 1]));
    let y = op.forward(&[&x, &w]).unwrap().remove(0);
    let dy = random(&mut rng, y.shape());
    let mut group = c.benchmark_group("conv_8x3x64x64_k3");
    for (mode, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("forward", mode), |bench| {
            bench.iter(|| op.forward(&[&x, &w]).unwrap())
        });
        group.bench_function(BenchmarkId::new("backward", mode), |bench| {
            bench.iter(|| op.backward(&[&dy], &[&x, &w], &[&y]).unwrap())
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn lenet_step(c: &mut Criterion) {
    let g = models::lenet(DType::F32, 0).unwrap();
    let mut rng = Rng::new(2, 0);
    let labels: Vec<f32> = (0..32).map(|i| (i % 10) as f32).collect();
    let feeds = BTreeMap::from([
        ("x".to_string(), random(&mut rng, &[32, 28, 28])),
        ("labels".to_string(), Tensor::from_vec([32], labels).unwrap()),
    ]);
    let mut group = c.benchmark_group("lenet_batch32_step");
    group.sample_size(20);
    for (mode, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(mode), |bench| {
            bench.iter(|| inference_and_backprop(&g, &feeds, &["loss"], "loss", &mut Events::new()).unwrap())
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, gemm, conv, lenet_step);
criterion_main!(benches);
