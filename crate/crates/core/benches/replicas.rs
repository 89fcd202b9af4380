//! Replica fan-out: rayon pool against the plain loop.
//!
//! Without the `parallel` feature both variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sipcond::cbm::{self, CBMParams, PathOptions};
use sipcond::engine::{self, EventCounter};
use sipcond::model::{Configuration, ModelParams};
use sipcond::par;
use sipcond::rng::replica_rng;

fn sip_replica(params: &ModelParams, eta0: &Configuration, i: u64) -> u64 {
    let mut rng = replica_rng(7, i);
    let mut counter = EventCounter::default();
    engine::run(params, eta0, 2e-3, &mut rng, &mut counter).unwrap();
    counter.events
}

fn sip(c: &mut Criterion) {
    let params = ModelParams::new(32, 32, 1e-4, 2).unwrap();
    let eta0 = Configuration::from_condensates(32, &[(0, 16), (16, 16)]).unwrap();
    let mut group = c.benchmark_group("sip_replicas");
    group.sample_size(10);
    for replicas in [8usize, 64] {
        let indices = par::range(replicas);
        group.bench_with_input(BenchmarkId::new("parallel", replicas), &indices, |b, idx| {
            b.iter(|| black_box(par::map_indices(idx, |i| sip_replica(&params, &eta0, i))))
        });
        group.bench_with_input(BenchmarkId::new("sequential", replicas), &indices, |b, idx| {
            b.iter(|| black_box(par::map_indices_sequential(idx, |i| sip_replica(&params, &eta0, i))))
        });
    }
    group.finish();
}

fn cbm_paths(c: &mut Criterion) {
    let params = CBMParams::new(2, 1.0, 1e-4, true).unwrap();
    let options = PathOptions::default();
    let u0 = [0.0, 0.5];
    let path = |i: u64| {
        let mut rng = replica_rng(11, i);
        cbm::sample_path(&params, &u0, 0.05, &options, &mut rng).unwrap().steps
    };
    let mut group = c.benchmark_group("cbm_paths");
    group.sample_size(10);
    for replicas in [64usize, 512] {
        let indices = par::range(replicas);
        group.bench_with_input(BenchmarkId::new("parallel", replicas), &indices, |b, idx| {
            b.iter(|| black_box(par::map_indices(idx, path)))
        });
        group.bench_with_input(BenchmarkId::new("sequential", replicas), &indices, |b, idx| {
            b.iter(|| black_box(par::map_indices_sequential(idx, path)))
        });
    }
    group.finish();
}

criterion_group!(benches, sip, cbm_paths);
criterion_main!(benches);
