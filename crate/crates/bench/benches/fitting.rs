use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mglmm::sim::quadrature_mle;
use mglmm::{fit_design, fit_laplace_design, FitOptions, GodambeBlocks, LaplaceOptions};
use mglmm_bench::bivariate;
use nalgebra::DMatrix;

fn conditional(c: &mut Criterion) {
    let mut g = c.benchmark_group("conditional_fit");
    g.sample_size(10);
    for q in [10, 60] {
        let design = bivariate(q, 200);
        g.bench_with_input(BenchmarkId::from_parameter(q), &design, |b, d| {
            b.iter(|| fit_design(d, &FitOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn laplace(c: &mut Criterion) {
    let mut g = c.benchmark_group("laplace_fit");
    g.sample_size(10);
    let design = bivariate(20, 100);
    g.bench_function("q20", |b| b.iter(|| fit_laplace_design(&design, &FitOptions::default(), &LaplaceOptions::default()).unwrap()));
    g.finish();
}

fn quadrature(c: &mut Criterion) {
    let design = bivariate(20, 100);
    let (m, comp) = (&design.marginals[1], &design.clusters.components[0]);
    c.bench_function("quadrature_mle/q20", |b| b.iter(|| quadrature_mle(m, comp, 20).unwrap()));
}

fn godambe(c: &mut Criterion) {
    let mut g = c.benchmark_group("godambe_assemble");
    for (k, q) in [(2, 10), (5, 100)] {
        let p = k + q;
        let s = DMatrix::from_fn(p, p, |i, j| if i == j { p as f64 } else { ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5 });
        let v = &s * s.transpose();
        g.bench_function(format!("k{k}_q{q}"), |b| b.iter(|| GodambeBlocks::assemble(&s, &v, k).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, conditional, laplace, quadrature, godambe);
criterion_main!(benches);
