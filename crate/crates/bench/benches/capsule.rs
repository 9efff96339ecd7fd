use std::hint::black_box;

use capsule_bench::{committee_workload, key_fixture};
use capsule_core::harness::{run, RunOptions};
use capsule_core::shamir::{reconstruct_key, split_key};
use capsule_core::sim::raft_check::{run_consensus, ConsensusRunConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn sharing(c: &mut Criterion) {
    let mut group = c.benchmark_group("sharing");
    for n in [5u32, 9, 17, 33] {
        let f = key_fixture(n, 32, 7);
        let t = f.params.t() as usize;
        group.throughput(Throughput::Elements(1));
        group.bench_with_input(BenchmarkId::new("split_32B", n), &f, |b, f| {
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            b.iter(|| split_key(black_box(&f.key), &f.params, &mut rng).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("reconstruct_32B", n), &f, |b, f| {
            b.iter(|| reconstruct_key(black_box(&f.columns[..t]), &f.params).unwrap())
        });
    }
    group.finish();
}

fn consensus(c: &mut Criterion) {
    let mut group = c.benchmark_group("consensus");
    group.sample_size(10);
    for n in [3u32, 5, 7] {
        group.bench_function(BenchmarkId::new("faulty_run", n), |b| {
            b.iter(|| run_consensus(&ConsensusRunConfig::local(n, 1)))
        });
    }
    group.finish();
}

// Wall-clock cost of simulating a committee, not the simulated throughput
// (the `capsule bench` command reports that).
fn committee(c: &mut Criterion) {
    let mut group = c.benchmark_group("committee");
    group.sample_size(10);
    for n in [5u32, 9] {
        let sc = committee_workload(n, 20);
        group.throughput(Throughput::Elements(20));
        group.bench_with_input(BenchmarkId::new("20_requests", n), &sc, |b, sc| {
            b.iter(|| run(sc, RunOptions::new(1)).metrics.granted)
        });
    }
    group.finish();
}

criterion_group!(benches, sharing, consensus, committee);
criterion_main!(benches);
