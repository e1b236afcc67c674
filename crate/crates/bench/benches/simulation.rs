use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use metrolink_core::drift::{
    run_phase_lock_chain, run_sampled_correction, simulate_drift, simulate_phase_chain, DriftProcess, PhaseChain,
};
use metrolink_core::link_sim::run_link;
use metrolink_core::{LinkParameters, LinkSetup, Mode, RunConfig, SeedTree};

fn link(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_link");
    group.sample_size(10);
    let ps = LinkSetup::new(LinkParameters::delayed_choice().with_window(20.0));
    group.bench_function("post_selected_60s", |b| {
        b.iter(|| run_link(&ps, Mode::PostSelected, 60.0, SeedTree::new(1)).unwrap())
    });
    let h = RunConfig::heralded().setup();
    group.bench_function("heralded_1000s", |b| {
        b.iter(|| run_link(&h, Mode::Heralded, 1_000.0, SeedTree::new(1)).unwrap())
    });
    group.finish();
}

fn drift(c: &mut Criterion) {
    let chain = PhaseChain::heralded();
    c.bench_function("phase_chain/analytic", |b| b.iter(|| run_phase_lock_chain(black_box(&chain)).unwrap()));
    let mut group = c.benchmark_group("drift");
    group.sample_size(10);
    group.bench_function("phase_chain/time_domain_10ms", |b| {
        b.iter(|| simulate_phase_chain(&chain, 0.01, 2e-7, &SeedTree::new(1)).unwrap())
    });
    group.bench_function("timing/day_with_corrections", |b| {
        b.iter(|| {
            let trace = simulate_drift(&DriftProcess::fiber_timing(1), 86_400.0, 1.0).unwrap();
            run_sampled_correction(&trace, 900.0, 50.0).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, link, drift);
criterion_main!(benches);
