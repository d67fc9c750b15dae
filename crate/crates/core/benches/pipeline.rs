use std::hint::black_box;

use apcal::costs::combined_cost;
use apcal::exec::Exec;
use apcal::simulator::{office_scene, simulate_dataset, SimConfig};
use apcal::trainer::{compute_gradient, init_params, TrainerConfig};
use apcal::trilateration::LocalizerConfig;
use apcal::CostWeights;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let scene = office_scene();
    let sim = SimConfig {
        steps: 300,
        test_steps: 1,
        ..SimConfig::default()
    };
    let ds = simulate_dataset(&scene, &sim, Exec::Sequential).unwrap();
    let ids: Vec<String> = ds.train.iter().map(|t| t.device_id.clone()).collect();
    let start = init_params(&scene, &ids).unwrap();
    let windows: Vec<_> = ds.train.iter().map(|t| t.window(100, 30)).collect();

    let mut g = c.benchmark_group("gradient_fd_minibatch");
    for (name, exec) in MODES {
        let cfg = TrainerConfig {
            exec,
            ..TrainerConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| compute_gradient(black_box(&windows), &scene, &start, cfg).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("combined_cost_full");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                combined_cost(
                    black_box(&ds.train),
                    &scene,
                    &ds.truth,
                    &CostWeights::default(),
                    &LocalizerConfig::default(),
                    exec,
                )
                .unwrap()
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("simulate_dataset");
    g.sample_size(20);
    let big = SimConfig {
        devices: 8,
        ..SimConfig::default()
    };
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| simulate_dataset(black_box(&scene), &big, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
