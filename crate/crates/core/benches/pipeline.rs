use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tracevote_core::orchestrator::run_benchmark_with;
use tracevote_core::synth::{generate_synthetic_dataset_with, NoiseProfile};
use tracevote_core::{Execution, RunConfig};

fn modes() -> [(&'static str, Execution); 2] {
    [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)]
}

fn generation(c: &mut Criterion) {
    let profile = NoiseProfile::default();
    let mut group = c.benchmark_group("generate_200x32");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_synthetic_dataset_with(200, 32, &profile, 7, exec).unwrap())
        });
    }
    group.finish();
}

fn runs(c: &mut Criterion) {
    let data = generate_synthetic_dataset_with(200, 32, &NoiseProfile::default(), 7, Execution::Parallel)
        .unwrap();
    for (label, cfg) in [("offline", RunConfig::default()), ("online", RunConfig::online())] {
        let mut group = c.benchmark_group(format!("{label}_200x32"));
        group.sample_size(10);
        for (name, exec) in modes() {
            group.bench_function(BenchmarkId::from_parameter(name), |b| {
                b.iter(|| run_benchmark_with(&data.bundles, &cfg, exec).unwrap())
            });
        }
        group.finish();
    }
}

criterion_group!(benches, generation, runs);
criterion_main!(benches);
