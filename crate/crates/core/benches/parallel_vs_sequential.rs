use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dynloc::channel_sim::{generate_environment, sample_positions, synthesize_many, ArrayConfig, Rect};
use dynloc::da::{generate_labeled, train, Method, TrainConfig};
use dynloc::nn::Architecture;
use dynloc::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn channels(c: &mut Criterion) {
    let env = generate_environment(1, 20, ArrayConfig::default(), Rect::reference_default()).unwrap();
    let positions = sample_positions(&env.area, 512, 2).unwrap();
    let mut g = c.benchmark_group("synthesize_512");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| synthesize_many(&env, &positions, exec).unwrap())
        });
    }
    g.finish();
}

fn gradient_epoch(c: &mut Criterion) {
    let env = generate_environment(1, 20, ArrayConfig::default(), Rect::reference_default()).unwrap();
    let source = generate_labeled(&env, 200, 3, Execution::Parallel).unwrap();
    let target = generate_labeled(&env, 200, 4, Execution::Parallel)
        .unwrap()
        .strip_labels();
    let arch = Architecture::reference(16, 32);
    let mut cfg = TrainConfig::reference(Method::Gr, 5);
    cfg.epochs = 1;
    let mut g = c.benchmark_group("gr_epoch_200");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train(&source, Some(&target), &arch, &env.area, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, channels, gradient_epoch);
criterion_main!(benches);
