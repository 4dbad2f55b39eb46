use criterion::{criterion_group, criterion_main, Criterion};
use didlab::aggregate::event_study;
use didlab::did2x2::Estimator;
use didlab::inference::{attach_bands, BandOptions};
use didlab::nuisance::{fit_logit, LogitOptions};
use didlab::staggered::{att_gt, Assumption, AttGtSettings};
use didlab_bench::county_sized_panel;
use nalgebra::DMatrix;

fn logit(c: &mut Criterion) {
    let d = county_sized_panel(1);
    let n = d.n_units();
    let k = d.n_covariates();
    let x = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { d.baseline_covariates(i)[j - 1] });
    let treated: Vec<bool> = d.units().iter().map(|u| !u.group.is_never()).collect();
    let w = vec![1.0; n];
    c.bench_function("logit_2604x7", |b| b.iter(|| fit_logit(&x, &treated, &w, LogitOptions::default()).unwrap()));
}

fn group_time(c: &mut Criterion) {
    let d = county_sized_panel(2);
    let mut group = c.benchmark_group("att_gt");
    group.sample_size(10);
    for estimator in [Estimator::Means, Estimator::Dr] {
        let settings = AttGtSettings { assumption: Assumption::NotYet, estimator, ..Default::default() };
        group.bench_function(estimator.name(), |b| b.iter(|| att_gt(&d, &settings).unwrap()));
    }
    group.finish();
}

fn bootstrap(c: &mut Criterion) {
    let d = county_sized_panel(3);
    let curve = event_study(&att_gt(&d, &AttGtSettings::default()).unwrap()).unwrap();
    let mut group = c.benchmark_group("sup_t");
    group.sample_size(10);
    group.bench_function("999_draws", |b| {
        b.iter(|| {
            let mut c = curve.clone();
            attach_bands(&mut c, BandOptions { draws: 999, seed: 7, ..Default::default() }).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, logit, group_time, bootstrap);
criterion_main!(benches);
