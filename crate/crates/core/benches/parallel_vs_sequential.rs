//! Same kernels on the default rayon pool and pinned to one thread.
//! Built without the `parallel` feature both arms run sequentially.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use gqakit::attention::{AttentionConfig, Checkpoint};
use gqakit::par::single_threaded;
use gqakit::tensor::{matmul, Rng, Tensor};
use gqakit::train::{loss_and_grads, SyntheticTask};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let mut rng = Rng::new(n as u64);
        let a = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::new("pool", n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("single", n), &n, |bench, _| {
            single_threaded(|| bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()))
        });
    }
    group.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let cfg = AttentionConfig::new(8, 2, 8, 2, 32, true).unwrap();
    let ck = Checkpoint::<f32>::init(cfg, 0).unwrap();
    let batch = SyntheticTask::markov(0, 32, 24).sampler().unwrap().corpus(16, 1);
    let mut group = c.benchmark_group("loss_and_grads");
    group.bench_function("pool", |bench| bench.iter(|| loss_and_grads(black_box(&ck), black_box(&batch)).unwrap()));
    group.bench_function("single", |bench| {
        single_threaded(|| bench.iter(|| loss_and_grads(black_box(&ck), black_box(&batch)).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_gradients);
criterion_main!(benches);
