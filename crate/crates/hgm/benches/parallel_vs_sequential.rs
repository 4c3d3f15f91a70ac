//! Data-parallel sweep core vs the sequential fallback on the same workloads.
//! Build with `--no-default-features` to measure the fallback `par_map` too.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use hgm::oracle::{random_mdp, verify_theorem};
use hgm::runtime::{PolicyKind, RunConfig};
use hgm::sweep::{par_map, run_seed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.budget = 200;
    cfg.env.task_count = 30;
    cfg.env.sigma_u = 0.1;
    cfg.env.sigma_m = 0.2;
    cfg.env.drift_gain = 0.3;
    cfg.env.u_m_coupling = -0.9;
    cfg.policy_kind = PolicyKind::Hgm;
    cfg
}

fn sweep_batch(c: &mut Criterion) {
    let cfg = bench_cfg();
    let seeds: Vec<u64> = (0..16).collect();
    let mut group = c.benchmark_group("sweep_batch_16x200");
    group.sample_size(10);
    group.bench_function("par_map", |b| {
        b.iter(|| {
            let rows = par_map(&seeds, |&s| run_seed(&cfg, s).unwrap());
            black_box(rows.len())
        })
    });
    group.bench_function("sequential_map", |b| {
        b.iter(|| {
            let rows: Vec<_> = seeds.iter().map(|&s| run_seed(&cfg, s).unwrap()).collect();
            black_box(rows.len())
        })
    });
    group.finish();
}

fn oracle_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mdps: Vec<_> = (0..24).map(|_| random_mdp(&mut rng, 4, 4)).collect();
    let mut group = c.benchmark_group("oracle_batch_24");
    group.sample_size(10);
    group.bench_function("par_map", |b| {
        b.iter(|| {
            let reports = par_map(&mdps, |m| verify_theorem(m).unwrap());
            black_box(reports.iter().filter(|r| r.passed()).count())
        })
    });
    group.bench_function("sequential_map", |b| {
        b.iter(|| {
            let reports: Vec<_> = mdps.iter().map(|m| verify_theorem(m).unwrap()).collect();
            black_box(reports.iter().filter(|r| r.passed()).count())
        })
    });
    group.finish();
}

criterion_group!(benches, sweep_batch, oracle_batch);
criterion_main!(benches);
