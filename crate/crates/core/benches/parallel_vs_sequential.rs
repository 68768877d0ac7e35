use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dacil::detector::{DetectorConfig, DetectorState};
use dacil::eval::detect;
use dacil::par::Execution;
use dacil::trainer::{train_supervised, TrainConfig};
use dacil::workbench::synth::{synth_domain, DomainSpec};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn detector() -> DetectorConfig {
    DetectorConfig {
        num_seeds: 64,
        knn: 32,
        hidden: 32,
        num_proposals: 24,
        group_radius: 0.3,
        num_classes: 5,
        bn_momentum: 0.9,
    }
}

fn bench(c: &mut Criterion) {
    let (source, _) = DomainSpec::desk_pair();
    let scenes = synth_domain(&source, 1, 0, 8, Execution::Sequential).unwrap();
    let state = DetectorState::new(detector(), 2).unwrap();

    let mut g = c.benchmark_group("synth_domain");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| synth_domain(&source, 1, 0, 8, exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("detect");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| detect(&state, &scenes, 0.25, exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            execution: exec,
            ..TrainConfig::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| train_supervised(&state, &scenes, 1, "bench", &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
