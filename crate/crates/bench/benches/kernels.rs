use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nbmix_core::simlab::generate_dataset;
use nbmix_core::{e_step, fit, nb_log_pmf, run_tests, FitConfig, NBParams, SimDesign, TestKind};
use std::hint::black_box;

fn bench_pmf(c: &mut Criterion) {
    let params = NBParams::new(87.5, 12.0).unwrap();
    c.bench_function("nb_log_pmf/1000 counts", |b| {
        b.iter(|| (0..1000u64).map(|y| nb_log_pmf(black_box(y), params)).sum::<f64>())
    });
}

fn bench_em(c: &mut Criterion) {
    let data = generate_dataset(&SimDesign::default()).unwrap().data;
    let config = FitConfig::default();
    let fitted = fit(&data, 3, &config).unwrap();
    c.bench_function("e_step/p300 K3", |b| {
        b.iter(|| e_step(black_box(&data), &fitted.params).unwrap())
    });

    let mut group = c.benchmark_group("fit/p300");
    group.sample_size(10);
    for k in [1usize, 3] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| fit(black_box(&data), k, &config).unwrap())
        });
    }
    group.finish();

    c.bench_function("run_tests/p300 all", |b| {
        b.iter(|| run_tests(&fitted, black_box(&data), &TestKind::ALL, true).unwrap())
    });
}

criterion_group!(benches, bench_pmf, bench_em);
criterion_main!(benches);
