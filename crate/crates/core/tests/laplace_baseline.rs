mod common;

use common::{instance, max_abs, rng};
use mglmm::estimator::{glm_fit, inference_functions};
use mglmm::{fit_laplace_design, ClusterStructure, Design, Family, FitOptions, LaplaceOptions};
use nalgebra::{DMatrix, DVector};

fn design(family: Family, seed: u64, n: usize, q: usize, sigma2: f64) -> Design {
    let mut r = rng(seed);
    let inst = instance(&mut r, family, n, q, 2, &[0.6, -0.4], sigma2);
    Design::new(vec![inst.m], ClusterStructure::single(inst.comp))
}

#[test]
fn normal_fixed_variance_matches_generalised_least_squares() {
    let d = design(Family::Normal, 41, 150, 10, 0.5);
    let sigma2 = 0.5;
    let lopts = LaplaceOptions { fixed_sigma: Some(DMatrix::from_element(1, 1, sigma2)), ..Default::default() };
    let fit = fit_laplace_design(&d, &FitOptions::default(), &lopts).unwrap();
    assert!(fit.result.converged);
    let m = &d.marginals[0];
    let z = d.clusters.components[0].z_matrix();
    let lambda = fit.result.marginals[0].lambda;
    let v = DMatrix::identity(m.n(), m.n()) * lambda + &z * z.transpose() * sigma2;
    let vi = v.try_inverse().unwrap();
    let beta = (m.x.transpose() * &vi * &m.x).try_inverse().unwrap() * m.x.transpose() * &vi * &m.y;
    let b = z.transpose() * &vi * (&m.y - &m.x * &beta) * sigma2;
    assert!(max_abs(&(fit.result.beta(0) - &beta)) < 1e-6);
    assert!(max_abs(&(&fit.result.b[0][0] - &b)) < 1e-6);
}

#[test]
fn vanishing_variance_recovers_the_glm() {
    let d = design(Family::Poisson, 42, 200, 8, 0.3);
    let lopts = LaplaceOptions { fixed_sigma: Some(DMatrix::from_element(1, 1, 1e-10)), ..Default::default() };
    let opts = FitOptions::default();
    let fit = fit_laplace_design(&d, &opts, &lopts).unwrap();
    let (glm, _) = glm_fit(&d.marginals[0], &opts).unwrap();
    assert!(max_abs(&(fit.result.beta(0) - glm)) < 1e-6);
    assert!(max_abs(&fit.result.b[0][0]) < 1e-6);
}

#[test]
fn fixed_effect_inference_function_vanishes_at_the_laplace_solution() {
    for (family, seed) in [(Family::Poisson, 43), (Family::Normal, 44)] {
        let d = design(family, seed, 240, 12, 0.3);
        let fit = fit_laplace_design(&d, &FitOptions::default(), &LaplaceOptions::default()).unwrap();
        assert!(fit.result.converged, "{family}");
        let comps = [&d.clusters.components[0]];
        let (pb, _) = inference_functions(&d.marginals[0], &comps, fit.result.beta(0), &fit.result.b[0]).unwrap();
        assert!(max_abs(&pb) < 1e-6, "{family}: {:e}", max_abs(&pb));
    }
}

#[test]
fn cluster_inference_function_carries_the_penalty() {
    let d = design(Family::Normal, 45, 240, 12, 0.3);
    let fit = fit_laplace_design(&d, &FitOptions::default(), &LaplaceOptions::default()).unwrap();
    assert!(fit.result.converged);
    let sigma2 = fit.result.sigma2().unwrap();
    let lambda = fit.result.marginals[0].lambda;
    let b = &fit.result.b[0][0];
    let comps = [&d.clusters.components[0]];
    let (_, pv) = inference_functions(&d.marginals[0], &comps, fit.result.beta(0), std::slice::from_ref(b)).unwrap();
    // ψ*_b = −2λ D⁻¹ b with D = σ²I.
    let penalty: DVector<f64> = b * (-2.0 * lambda / sigma2);
    let gap = max_abs(&(&pv[0] - penalty));
    assert!(gap < 1e-6, "{gap:e}");
}
