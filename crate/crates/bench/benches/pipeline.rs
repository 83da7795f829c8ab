use std::hint::black_box;

use betasort::inference::{grand_mean_band, GrandMeanTarget};
use betasort::io::run::{butterfly, estimate, high_minus_low};
use betasort::kernel::estimate_beta_panel;
use betasort::montecarlo::{run_replication, Check, McConfig};
use betasort::sorting::sort_panel;
use betasort_bench::{config, estimated, fixture};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn first_stage(c: &mut Criterion) {
    let mut g = c.benchmark_group("first_stage");
    for &(n, t) in &[(100, 200), (200, 400), (500, 400)] {
        let (panel, factor) = fixture(n, t);
        let spec = config().kernel_spec(t).unwrap();
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}x{t}")),
            &(),
            |b, _| b.iter(|| estimate_beta_panel(black_box(&panel), &factor, &spec).unwrap()),
        );
    }
    g.finish();
}

fn sorting(c: &mut Criterion) {
    let (panel, factor) = fixture(500, 400);
    let spec = config().kernel_spec(400).unwrap();
    let betas = estimate_beta_panel(&panel, &factor, &spec).unwrap();
    c.bench_function("sort_panel/500x400", |b| {
        b.iter(|| sort_panel(black_box(&panel), &betas, 10, false).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let (panel, factor) = fixture(200, 200);
    let cfg = config();
    c.bench_function("estimate/200x200", |b| {
        b.iter(|| estimate(black_box(&panel), &factor, &cfg).unwrap())
    });
}

fn inference(c: &mut Criterion) {
    let (_, est) = estimated(200, 200);
    let cfg = config();
    let mut g = c.benchmark_group("inference");
    g.bench_function("band", |b| {
        b.iter(|| {
            grand_mean_band(&est.curve, &est.var, &cfg.sim(1), GrandMeanTarget::MuBarT).unwrap()
        })
    });
    g.bench_function("high_minus_low", |b| {
        b.iter(|| high_minus_low(&est, &cfg).unwrap())
    });
    g.bench_function("butterfly", |b| b.iter(|| butterfly(&est, &cfg).unwrap()));
    g.finish();
}

fn replication(c: &mut Criterion) {
    let mut cfg = McConfig::default();
    cfg.sim.draws = 2_000;
    cfg.checks = vec![Check::FirstStage, Check::GrandMean, Check::HighMinusLow];
    let mut g = c.benchmark_group("montecarlo");
    g.sample_size(10);
    g.bench_function("replication/200x200", |b| {
        b.iter(|| run_replication(&cfg, black_box(0)))
    });
    g.finish();
}

criterion_group!(
    benches,
    first_stage,
    sorting,
    pipeline,
    inference,
    replication
);
criterion_main!(benches);
