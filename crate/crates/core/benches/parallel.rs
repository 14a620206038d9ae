//! Rayon data-parallel paths versus the same code pinned to one thread.

use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hiercomp_core::composability::analyze;
use hiercomp_core::fixtures;
use hiercomp_core::model::DiscreteCombination;
use hiercomp_core::par;
use hiercomp_core::sampler::sample_many;
use hiercomp_core::structure::{recover_structure, RecoveryOptions};
use hiercomp_core::support::SupportOptions;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("single", false)]
}

fn run<R: Send>(parallel: bool, f: impl FnOnce() -> R + Send) -> R {
    if parallel {
        f()
    } else {
        par::single_threaded(f)
    }
}

fn bench_sampling(c: &mut Criterion) {
    let m = fixtures::layered_linear(0.5);
    let combos = m.all_combinations();
    let mut g = c.benchmark_group("sample_many");
    for (name, parallel) in modes() {
        g.bench_function(BenchmarkId::new(name, 20_000), |b| {
            b.iter(|| run(parallel, || sample_many(&m, &combos, 5_000, 1).unwrap()))
        });
    }
    g.finish();
}

fn bench_composability(c: &mut Criterion) {
    let m = fixtures::layered_linear(0.3);
    let train: BTreeSet<DiscreteCombination> =
        [DiscreteCombination::new(vec![0, 1]), DiscreteCombination::new(vec![1, 0])].into();
    let opts = SupportOptions { n: 5_000, seed: 0, prefer_exact: false, ..Default::default() };
    let mut g = c.benchmark_group("composability");
    g.sample_size(10);
    for (name, parallel) in modes() {
        g.bench_function(name, |b| b.iter(|| run(parallel, || analyze(&m, &train, None, &opts).unwrap())));
    }
    g.finish();
}

fn bench_recovery(c: &mut Criterion) {
    let m = fixtures::layered_linear(0.5);
    let batch = sample_many(&m, &m.all_combinations(), 5_000, 2).unwrap();
    let mut g = c.benchmark_group("recover_structure");
    g.sample_size(10);
    for (name, parallel) in modes() {
        g.bench_function(name, |b| {
            b.iter(|| {
                run(parallel, || {
                    recover_structure(std::slice::from_ref(&batch), m.widths(), &RecoveryOptions::default()).unwrap()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_sampling, bench_composability, bench_recovery);
criterion_main!(benches);
