//! Sequential vs rayon-parallel execution of the data-parallel paths.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iat_core::config::RunConfig;
use iat_core::data::{generate_scenes, SceneConfig};
use iat_core::model::Model;
use iat_core::numeric::kernels::matmul_with;
use iat_core::train::{batch_gradients, prepare_targets};
use iat_core::{Exec, Tensor};

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [64, 256] {
        let a = Tensor::uniform([n, n], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([n, n], -1.0, 1.0, &mut rng);
        for (name, exec) in STRATEGIES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, &n| {
                bench.iter(|| matmul_with(exec, black_box(a.data()), black_box(b.data()), n, n, n))
            });
        }
    }
    group.finish();
}

fn bench_scene_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_scenes");
    let cfg = SceneConfig::default();
    for (name, exec) in STRATEGIES {
        group.bench_function(name, |bench| {
            bench.iter(|| generate_scenes(black_box(7), 32, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_batch_gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    let cfg = RunConfig::default();
    let (model, store) = Model::new(&cfg).unwrap();
    let scenes: Vec<_> = generate_scenes(7, 8, &SceneConfig::default(), Exec::Sequential)
        .unwrap()
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let targets: Vec<_> = scenes.iter().map(|s| prepare_targets(s).unwrap()).collect();
    let batch: Vec<_> = scenes
        .iter()
        .zip(&targets)
        .map(|(s, t)| (&s.image, t.as_slice()))
        .collect();
    let loss = cfg.loss();
    for (name, exec) in STRATEGIES {
        group.bench_function(name, |bench| {
            bench.iter(|| batch_gradients(&model, &store, black_box(&batch), &loss, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_scene_generation, bench_batch_gradients);
criterion_main!(benches);
