//! Sequential against data-parallel sweeps: seed rollouts and tuner grids.
//!
//! Without the `parallel` feature both strategies run the same sequential
//! loop, so the pair doubles as an overhead check.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use percgen_core::envsim::EnvConfig;
use percgen_core::executor::{Executor, ParallelConfig, PipelineConfig, RunSpec};
use percgen_core::par::Strategy;
use percgen_core::policy::Policy;
use percgen_core::tuner::{TuneRequest, Tuner};

const STRATEGIES: [(&str, Strategy); 2] = [("sequential", Strategy::Sequential), ("parallel", Strategy::Parallel)];

fn seed_rollouts(c: &mut Criterion) {
    let ex = Executor::new(Policy::refinement_default(), EnvConfig::default()).unwrap();
    let specs = [
        ("seq", RunSpec::Seq),
        ("pipe-2-4", RunSpec::Pipe(PipelineConfig::new(2, 4).with_offset(-1))),
        (
            "par-3",
            RunSpec::Par(ParallelConfig {
                workers: 3,
                capacity: 1,
            }),
        ),
    ];
    let seeds: Vec<u64> = (0..20).collect();
    let mut group = c.benchmark_group("seed_rollouts");
    for (mode, spec) in &specs {
        for (name, strategy) in STRATEGIES {
            group.bench_with_input(BenchmarkId::new(name, mode), spec, |b, spec| {
                b.iter(|| black_box(ex.accuracy(spec, &seeds, strategy).unwrap()));
            });
        }
    }
    group.finish();
}

fn tuner_grid(c: &mut Criterion) {
    let policy = Policy::refinement_default();
    let mut req = TuneRequest::new(
        policy.clone(),
        EnvConfig::default(),
        2000.0 / policy.sequential_cost() as f64,
    );
    req.seeds = (0..8).collect();
    let mut group = c.benchmark_group("tuner_grid");
    for l_max in [4, 6] {
        req.l_max = l_max;
        for (name, strategy) in STRATEGIES {
            let tuner = Tuner::new(&req).unwrap().with_strategy(strategy);
            group.bench_function(BenchmarkId::new(name, format!("l_max={l_max}")), |b| {
                b.iter(|| black_box(tuner.grid_search().unwrap()));
            });
        }
    }
    group.finish();
}

criterion_group! {
    name = sweeps;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5));
    targets = seed_rollouts, tuner_grid
}
criterion_main!(sweeps);
