use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tlc_core::data::{generate, split, DataKind, SplitFractions};
use tlc_core::{evaluate, par, rank_layers, train_model, ActivationKind, NetSpec, SequentialNet, TrainSchedule};

const BACKEND: &str = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };

fn run<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        f()
    } else {
        par::with_threads(threads, f)
    }
}

fn bench(c: &mut Criterion) {
    let data = generate(DataKind::Spirals, 4000, 2, 0.1, 1).unwrap();
    let splits = split(&data, SplitFractions::default(), 2).unwrap();
    let spec = NetSpec::mlp(2, vec![128; 6], 2, ActivationKind::Relu);
    let net = SequentialNet::new(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let one_epoch = TrainSchedule {
        epochs: 1,
        milestones: vec![],
        ..TrainSchedule::default()
    };
    let (net, _) = train_model(&net, &splits.train, None, &one_epoch).unwrap();
    let calib = splits.train.features.clone();

    let threads = [("all-threads", 0usize), ("one-thread", 1)];
    let mut group = c.benchmark_group(format!("throughput/{BACKEND}"));
    group.sample_size(10);
    for (label, n) in threads {
        group.bench_function(BenchmarkId::new("evaluate", label), |b| {
            b.iter(|| run(n, || black_box(evaluate(&net, &splits.train).unwrap())))
        });
        group.bench_function(BenchmarkId::new("rank_layers", label), |b| {
            b.iter(|| run(n, || black_box(rank_layers(&net, &splits.val, &calib).unwrap())))
        });
        group.bench_function(BenchmarkId::new("train_epoch", label), |b| {
            b.iter(|| run(n, || black_box(train_model(&net, &splits.train, None, &one_epoch).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
