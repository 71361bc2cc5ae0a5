use covmc_bench::problem;
use covmc_core::als::{initialize, iterate, FitConfig};
use covmc_core::bootstrap::{bootstrap_samples, omega_hat, ContrastSpec};
use covmc_core::pca::iterate_pca;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const SIZES: [usize; 2] = [200, 500];

fn svd_init(c: &mut Criterion) {
    let mut g = c.benchmark_group("svd_init");
    g.sample_size(10);
    for n in SIZES {
        let p = problem(n, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| {
            b.iter(|| initialize(&p.y, &p.x, &p.prop, 3).unwrap())
        });
    }
    g.finish();
}

fn als_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("als_step");
    g.sample_size(10);
    let cfg = FitConfig::steps(3, 1);
    for n in SIZES {
        let p = problem(n, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| {
            b.iter(|| iterate(p.start.clone(), &p.y, &p.x, &cfg).unwrap())
        });
    }
    g.finish();
}

fn pca_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("pca_step");
    g.sample_size(10);
    let cfg = FitConfig::steps(3, 1);
    for n in SIZES {
        let p = problem(n, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &p, |b, p| {
            b.iter(|| iterate_pca(p.start.clone(), &p.y, &p.x, &cfg).unwrap())
        });
    }
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let mut g = c.benchmark_group("bootstrap_500");
    g.sample_size(10);
    for n in SIZES {
        let p = problem(n, n);
        let omega = omega_hat(&p.start, &p.y, &p.x, &p.prop).unwrap();
        let spec = ContrastSpec::all_zero(p.y.ncols(), p.x.dim());
        g.bench_with_input(BenchmarkId::from_parameter(n), &(), |b, _| {
            b.iter(|| bootstrap_samples(&omega, &spec, 500, 1).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, svd_init, als_step, pca_step, bootstrap);
criterion_main!(benches);
