use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use wwas_bench::{panel, problem, uniforms};
use wwas_core::feglm::{demean, DemeanOptions};
use wwas_core::ingest::weighted_median;
use wwas_core::screening::bh_adjust;
use wwas_core::{fit_poisson_fe, FitOptions};

fn bench_demean(c: &mut Criterion) {
    let mut group = c.benchmark_group("demean");
    for &(zips, years) in &[(150, 11), (1500, 11)] {
        let p = problem(&panel(zips, years, 1));
        let cols: Vec<Vec<f64>> = (0..p.x.ncols()).map(|j| p.x.column(j).iter().copied().collect()).collect();
        let factors: Vec<_> = p.factors.iter().collect();
        let w = uniforms(p.n(), 3);
        group.bench_with_input(BenchmarkId::from_parameter(zips * years), &cols, |b, cols| {
            b.iter(|| demean(black_box(cols), &factors, &w, &DemeanOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn bench_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_poisson_fe");
    group.sample_size(20);
    for &zips in &[30, 150, 600] {
        let p = problem(&panel(zips, 11, 2));
        group.bench_with_input(BenchmarkId::from_parameter(zips), &p, |b, p| {
            b.iter(|| fit_poisson_fe(black_box(p), &FitOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn bench_weighted_median(c: &mut Criterion) {
    let mut group = c.benchmark_group("weighted_median");
    for &n in &[100, 10_000] {
        let v = uniforms(n, 5);
        let w = uniforms(n, 6);
        group.bench_with_input(BenchmarkId::from_parameter(n), &(v, w), |b, (v, w)| {
            b.iter(|| weighted_median(black_box(v), black_box(w)).unwrap())
        });
    }
    group.finish();
}

fn bench_bh(c: &mut Criterion) {
    let p = uniforms(5_000, 7);
    c.bench_function("bh_adjust/5000", |b| b.iter(|| bh_adjust(black_box(&p))));
}

criterion_group!(benches, bench_demean, bench_fit, bench_weighted_median, bench_bh);
criterion_main!(benches);
