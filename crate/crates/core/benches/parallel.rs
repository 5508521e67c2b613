//! Thread-pool scaling of the data-parallel kernels.
//!
//! `cargo bench` compares a one-thread pool against the default pool;
//! `cargo bench --no-default-features` times the plain sequential build
//! under the same group names, so the reports line up.

use std::hint::black_box;

use banforge::data::{make_blob_splits, BlobSpec, Input};
use banforge::models::{build, forward_bound, ModelSpec, TeacherSnapshot};
use banforge::objectives::{combined_loss, DistillObjective, DistillTargets};
use banforge::par::is_parallel;
use banforge::pipeline::{
    evaluate, train_generation, EnsembleMode, EnsemblePredictor, GenerationContext, Metric, TrainConfig,
};
use banforge::{tensor, Graph, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let build = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    if !is_parallel() {
        return vec![("sequential".into(), build(1))];
    }
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut v = vec![("threads=1".to_string(), build(1))];
    if all > 1 {
        v.push((format!("threads={all}"), build(all)));
    }
    v
}

fn wave(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.618).sin())
}

fn matmul(c: &mut Criterion) {
    let n = 192;
    let (a, b) = (wave(&[n, n]), wave(&[n, n]));
    let mut g = c.benchmark_group("matmul_192");
    for (label, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |bench| {
            pool.install(|| bench.iter(|| black_box(tensor::matmul(a.data(), b.data(), n, n, n))))
        });
    }
    g.finish();
}

fn conv_step(c: &mut Criterion) {
    let spec = ModelSpec::resnet([3, 16, 16], 2, 1, 16, 10, 0);
    let model = build(&spec).unwrap();
    let input = Input::Dense(wave(&[32, 3, 16, 16]));
    let targets = DistillTargets::one_hot((0..32).map(|i| i % 10).collect(), 10).unwrap();
    let mut g = c.benchmark_group("resnet_forward_backward_b32");
    g.sample_size(20);
    for (label, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |bench| {
            pool.install(|| {
                bench.iter(|| {
                    let mut graph = Graph::new();
                    let bound = model.params.bind(&mut graph);
                    let z = forward_bound(&spec, &mut graph, &bound, &input).unwrap();
                    let loss = combined_loss(&mut graph, &DistillObjective::ce(), z, &targets, None).unwrap();
                    black_box(graph.backward(loss).unwrap())
                })
            })
        });
    }
    g.finish();
}

fn ensemble_eval(c: &mut Criterion) {
    let data = make_blob_splits(&BlobSpec::new(5, 32, 0, 1.0, 0.0, 3), 10, 10, 2048).unwrap();
    let members = (1..=3)
        .map(|s| TeacherSnapshot::new(&build(&ModelSpec::mlp(32, 2, 128, 5, s)).unwrap(), s as usize))
        .collect();
    let ens = EnsemblePredictor::new(members, EnsembleMode::Probabilities).unwrap();
    let mut g = c.benchmark_group("ensemble3_eval_2048");
    g.sample_size(20);
    for (label, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |bench| {
            pool.install(|| bench.iter(|| black_box(evaluate(&ens, &data.test, Metric::ErrorRate, 128).unwrap())))
        });
    }
    g.finish();
}

fn kd_epoch(c: &mut Criterion) {
    let mut data = make_blob_splits(&BlobSpec::new(5, 16, 0, 1.0, 0.1, 4), 1024, 128, 128).unwrap();
    data.normalize_from_train().unwrap();
    let spec = ModelSpec::mlp(16, 2, 64, 5, 0);
    let teacher = TeacherSnapshot::new(
        &build(&ModelSpec {
            seed: 9,
            ..spec.clone()
        })
        .unwrap(),
        0,
    );
    let cfg = TrainConfig {
        objective: DistillObjective::kd(),
        ..TrainConfig::new(1, 64, 0.05)
    };
    let ctx = GenerationContext {
        generation: 1,
        out_dir: None,
    };
    let mut g = c.benchmark_group("kd_epoch_mlp_1024");
    g.sample_size(10);
    for (label, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |bench| {
            pool.install(|| {
                bench.iter(|| black_box(train_generation(&spec, &cfg, Some(&teacher), &data, &ctx).unwrap()))
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, conv_step, ensemble_eval, kd_epoch);
criterion_main!(benches);
