//! Sequential vs rayon execution of the two data-parallel hot spots.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kvcarbon::carbon::CarbonParams;
use kvcarbon::par::Exec;
use kvcarbon::perfmodel::{profile_from_hits, ModelScale, SynthConfig};
use kvcarbon::planner::{brute_force_solve, Carryover, PlanningInstance, Window};
use kvcarbon::sim::{policy_bench, PolicyBenchConfig};
use kvcarbon::workload::TaskKind;

fn instance() -> PlanningInstance {
    let cfg = SynthConfig::preset(TaskKind::MultiTurn, ModelScale::Large);
    let hits: Vec<f64> = cfg.sizes.iter().map(|&s| 0.83 * (1.0 - (-(s as f64) / 3.0).exp())).collect();
    let grid = profile_from_hits(&cfg, &hits).unwrap();
    let slo = grid.slo();
    let max_rate = grid.max_rate();
    // 6 windows over 10 sizes: a million plans.
    let windows = (0..6)
        .map(|w| {
            let rate = max_rate * (0.3 + 0.1 * w as f64);
            Window { duration: 3600.0, rate, ci: 100.0 + 60.0 * w as f64, requests: (rate * 3600.0) as u64 }
        })
        .collect();
    PlanningInstance {
        windows,
        size_candidates: grid.sizes().iter().copied().take(10).collect(),
        grid,
        slo,
        carbon: CarbonParams::default(),
        carryover: Carryover::default(),
    }
}

fn bench(c: &mut Criterion) {
    let inst = instance();
    let mut g = c.benchmark_group("brute_force");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| brute_force_solve(&inst, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("policy_bench");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let cfg = PolicyBenchConfig { requests: 5_000, exec, ..PolicyBenchConfig::default() };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &cfg, |b, cfg| {
            b.iter(|| policy_bench(cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
