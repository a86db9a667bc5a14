//! Random-component variance and covariance estimation.
//!
//! b̂ is approximately `N(b, Σ_b̂)` given the realised components, and
//! `b ~ N(0, G)`. Integrating out `b` gives `b̂ ~ N(0, Σ_b̂ + G)`; the
//! estimate of `G`'s parameters maximises that density. For Student-t
//! components the integral has no closed form and is evaluated by importance
//! sampling.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::linalg::{self, chol_from_params, params_from_cov, psd_floor};
use crate::model::{Design, RandomDist};
use crate::optim::{bfgs, golden_max, BfgsOptions};

pub const SIGMA2_FLOOR: f64 = 1e-8;
pub const PSD_FLOOR: f64 = 1e-10;
pub const MC_POINTS: usize = 100_000;
const MC_SEED: u64 = 0x5eed_0f_7d15;

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// One d × d matrix per cluster component, in design order.
    pub matrices: Vec<DMatrix<f64>>,
    pub boundary: bool,
    pub converged: bool,
    pub grad_norm: f64,
    /// Whether Σ_b̂ needed eigenvalue repair.
    pub repaired: bool,
    /// Maximised log objective.
    pub objective: f64,
}

/// Covariance of b̂ per marginal at a fitted model (empirical sandwich).
pub fn sigma_b_hat(fit: &FitResult, design: &Design) -> Result<Vec<DMatrix<f64>>> {
    Ok(crate::asymptotics::godambe_blocks(fit, design, crate::asymptotics::Mode::Empirical)?
        .into_iter()
        .map(|g| g.sigma_b())
        .collect())
}

/// The integrated likelihood written out in terms of Σ_b̂⁻¹ and
/// P = (Σ_b̂⁻¹ + σ⁻²I)⁻¹, on the log scale.
pub fn varint_closed_form(b_hat: &DVector<f64>, sigma_b: &DMatrix<f64>, sigma2: f64) -> Result<f64> {
    let q = b_hat.len();
    let si = linalg::inverse(sigma_b)?;
    let p = linalg::inverse(&(&si + DMatrix::identity(q, q) / sigma2))?;
    let logdet = |m: &DMatrix<f64>| -> Result<f64> {
        let c = m.clone().cholesky().ok_or_else(|| Error::Singular("not positive definite".into()))?;
        Ok(2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    };
    let two_pi_q = q as f64 * (2.0 * PI).ln();
    let sb = &si * b_hat;
    Ok(-0.5 * (two_pi_q + logdet(sigma_b)?) - 0.5 * q as f64 * (2.0 * PI * sigma2).ln() - 0.5 * b_hat.dot(&sb)
        + 0.5 * (two_pi_q + logdet(&p)?)
        + 0.5 * sb.dot(&(&p * &sb)))
}

/// log N(b̂; 0, Σ_b̂ + σ²I).
pub fn log_objective(b_hat: &DVector<f64>, sigma_b: &DMatrix<f64>, sigma2: f64) -> Result<f64> {
    let q = b_hat.len();
    linalg::gaussian_log_density(b_hat, &(sigma_b + DMatrix::identity(q, q) * sigma2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceFit {
    pub sigma2: f64,
    pub boundary: bool,
    pub objective: f64,
    pub repaired: bool,
}

/// Eigen-form of the univariate objective: eigenvalues of Σ_b̂ and the
/// rotated b̂.
struct Spectral {
    lambda: Vec<f64>,
    a2: Vec<f64>,
}

impl Spectral {
    fn new(b_hat: &DVector<f64>, sigma_b: &DMatrix<f64>) -> (Self, bool) {
        let (fixed, repaired) = psd_floor(sigma_b, PSD_FLOOR);
        let eig = fixed.symmetric_eigen();
        let a = eig.eigenvectors.transpose() * b_hat;
        let spec = Spectral { lambda: eig.eigenvalues.iter().map(|v| v.max(PSD_FLOOR)).collect(), a2: a.iter().map(|v| v * v).collect() };
        (spec, repaired)
    }

    /// Objective and its first two derivatives in s = log σ².
    fn eval(&self, s: f64) -> (f64, f64, f64) {
        let t = s.exp();
        let (mut f, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for (l, a2) in self.lambda.iter().zip(&self.a2) {
            let u = l + t;
            f += (2.0 * PI * u).ln() + a2 / u;
            d1 += t / u - a2 * t / (u * u);
            d2 += t / u - t * t / (u * u) - a2 * (t / (u * u) - 2.0 * t * t / (u * u * u));
        }
        (-0.5 * f, -0.5 * d1, -0.5 * d2)
    }
}

/// Maximise a smooth function of log σ² over [ln floor, ln max]: a coarse
/// grid, golden-section refinement around the best point, and an optional
/// Newton polish. Returns (s, value, at_lower, at_upper).
fn maximise_log_scale(
    f: &(dyn Fn(f64) -> f64 + Sync),
    newton: Option<&dyn Fn(f64) -> (f64, f64, f64)>,
    lo: f64,
    mut hi: f64,
    grid: usize,
) -> (f64, f64, bool, bool) {
    for _ in 0..10 {
        let xs: Vec<f64> = (0..grid).map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64).collect();
        let vals: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let best = vals
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > vals[b] || !vals[b].is_finite() { i } else { b });
        if best == grid - 1 {
            hi += (100f64).ln();
            continue;
        }
        if best == 0 {
            let slope_down = match newton {
                Some(g) => g(lo).1 <= 0.0,
                None => vals[1] <= vals[0],
            };
            if slope_down {
                return (lo, vals[0], true, false);
            }
        }
        let a = xs[best.saturating_sub(1)];
        let b = xs[(best + 1).min(grid - 1)];
        let (mut s, mut fs) = golden_max(f, a, b, 1e-10);
        if let Some(g) = newton {
            // Near the optimum f is flat to rounding, so steps are judged by
            // the derivative rather than by f.
            for _ in 0..20 {
                let (_, d1, d2) = g(s);
                if !(d2 < 0.0) || d1 == 0.0 {
                    break;
                }
                let cand = (s - d1 / d2).clamp(a, b);
                let (fc, d1c, _) = g(cand);
                if d1c.abs() < d1.abs() {
                    s = cand;
                    fs = fc;
                } else {
                    break;
                }
            }
        }
        return (s, fs, false, false);
    }
    (hi, f(hi), false, true)
}

fn sigma2_max(b_hat: &DVector<f64>) -> f64 {
    let q = b_hat.len();
    let var = if q > 1 {
        let m = b_hat.mean();
        b_hat.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (q - 1) as f64
    } else {
        b_hat[0] * b_hat[0]
    };
    1e6 * var + 1.0
}

/// σ̂² maximising log N(b̂; 0, Σ_b̂ + σ²I).
pub fn estimate_variance_gaussian(b_hat: &DVector<f64>, sigma_b: &DMatrix<f64>) -> Result<VarianceFit> {
    if b_hat.is_empty() || sigma_b.shape() != (b_hat.len(), b_hat.len()) {
        return Err(Error::domain("b̂ and Σ_b̂ dimensions differ"));
    }
    let (spec, repaired) = Spectral::new(b_hat, sigma_b);
    let f = |s: f64| spec.eval(s).0;
    let g = |s: f64| spec.eval(s);
    let (s, value, at_lower, _) = maximise_log_scale(&f, Some(&g), SIGMA2_FLOOR.ln(), sigma2_max(b_hat).ln(), 200);
    Ok(VarianceFit { sigma2: if at_lower { SIGMA2_FLOOR } else { s.exp() }, boundary: at_lower, objective: value, repaired })
}

/// Student-t components: the integral is estimated by importance sampling
/// from the Gaussian conditional of b given b̂, with a fixed seed so the
/// objective is a smooth function of σ².
pub fn estimate_variance_student_t(b_hat: &DVector<f64>, sigma_b: &DMatrix<f64>, dof: f64, n_points: usize) -> Result<VarianceFit> {
    if !(dof > 2.0) {
        return Err(Error::config("student-t degrees of freedom must exceed 2"));
    }
    let q = b_hat.len();
    let (fixed, repaired) = psd_floor(sigma_b, PSD_FLOOR);
    let eig = fixed.symmetric_eigen();
    let u = eig.eigenvectors.clone();
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(PSD_FLOOR)).collect();
    let a = u.transpose() * b_hat;
    let log_norm_const: f64 = lam.iter().map(|l| (2.0 * PI * l).ln()).sum();
    let t_const = ln_gamma((dof + 1.0) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * (dof * PI).ln();
    const CHUNK: usize = 1000;
    let chunks = n_points.div_ceil(CHUNK);
    let objective = |s: f64| -> f64 {
        let sigma2 = s.exp();
        let scale2 = sigma2 * (dof - 2.0) / dof;
        let p: Vec<f64> = lam.iter().map(|l| 1.0 / (1.0 / l + 1.0 / sigma2)).collect();
        let m: Vec<f64> = (0..q).map(|i| p[i] * a[i] / lam[i]).collect();
        let log_prop_const: f64 = p.iter().map(|v| (2.0 * PI * v).ln()).sum();
        let parts: Vec<(f64, f64)> = (0..chunks)
            .into_par_iter()
            .map(|ch| {
                let mut rng = ChaCha8Rng::seed_from_u64(MC_SEED);
                rng.set_stream(ch as u64);
                let count = CHUNK.min(n_points - ch * CHUNK);
                let mut z = DVector::zeros(q);
                let mut c = DVector::zeros(q);
                let mut max = f64::NEG_INFINITY;
                let mut acc = 0.0;
                for _ in 0..count {
                    let mut zz = 0.0;
                    let mut lik = 0.0;
                    for i in 0..q {
                        let zi: f64 = StandardNormal.sample(&mut rng);
                        z[i] = zi;
                        zz += zi * zi;
                        c[i] = m[i] + p[i].sqrt() * zi;
                        lik += (a[i] - c[i]).powi(2) / lam[i];
                    }
                    let b = &u * &c;
                    let prior: f64 = b
                        .iter()
                        .map(|x| t_const - 0.5 * scale2.ln() - 0.5 * (dof + 1.0) * (1.0 + x * x / (dof * scale2)).ln())
                        .sum();
                    let lw = -0.5 * (log_norm_const + lik) + prior + 0.5 * (log_prop_const + zz);
                    if lw > max {
                        acc = acc * (max - lw).exp() + 1.0;
                        max = lw;
                    } else {
                        acc += (lw - max).exp();
                    }
                }
                (max, acc)
            })
            .collect();
        let max = parts.iter().fold(f64::NEG_INFINITY, |m, p| m.max(p.0));
        let total: f64 = parts.iter().map(|(m, a)| a * (m - max).exp()).sum();
        max + (total / n_points as f64).ln()
    };
    let (s, value, at_lower, _) = maximise_log_scale(&objective, None, SIGMA2_FLOOR.ln(), sigma2_max(b_hat).ln(), 40);
    Ok(VarianceFit { sigma2: if at_lower { SIGMA2_FLOOR } else { s.exp() }, boundary: at_lower, objective: value, repaired })
}

/// Generic maximiser of log N(v; 0, Σ_v + G(θ)) for a parameterised G.
/// `build` returns G and its derivatives with respect to each θ.
fn maximise_structured(
    v: &DVector<f64>,
    sigma_v: &DMatrix<f64>,
    theta0: &[f64],
    build: &dyn Fn(&[f64]) -> (DMatrix<f64>, Vec<DMatrix<f64>>),
) -> (Vec<f64>, f64, f64, bool) {
    let fg = |theta: &[f64]| -> (f64, Vec<f64>) {
        let (g, dg) = build(theta);
        let mut k = sigma_v + g;
        linalg::symmetrize(&mut k);
        let chol = match k.clone().cholesky() {
            Some(c) => c,
            None => {
                k += DMatrix::identity(v.len(), v.len()) * PSD_FLOOR;
                match k.cholesky() {
                    Some(c) => c,
                    None => return (f64::INFINITY, vec![0.0; theta.len()]),
                }
            }
        };
        let n = v.len() as f64;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let kinv_v = chol.solve(v);
        let ll = -0.5 * (n * (2.0 * PI).ln() + logdet + v.dot(&kinv_v));
        let kinv = chol.inverse();
        let m = &kinv_v * kinv_v.transpose() - kinv;
        let grad: Vec<f64> = dg.iter().map(|d| -0.5 * m.component_mul(d).sum()).collect();
        (-ll, grad)
    };
    let opts = BfgsOptions { grad_tol: 1e-7, max_iter: 1000, f_tol: 1e-15, ..Default::default() };
    let min = bfgs(fg, theta0, opts);
    (min.x, -min.value, min.grad_norm, min.converged)
}

/// Σ̂ for stacked b̂ = (b̂₍₁₎ᵀ, …, b̂₍d₎ᵀ)ᵀ with G = Σ ⊗ I_q.
pub fn estimate_covariance_multivariate(v: &DVector<f64>, sigma_v: &DMatrix<f64>, d: usize) -> Result<(DMatrix<f64>, CovarianceEstimate)> {
    let q = v.len() / d;
    if q * d != v.len() || q == 0 {
        return Err(Error::domain("stacked b̂ length is not a multiple of d"));
    }
    let (sv, repaired) = psd_floor(sigma_v, PSD_FLOOR);
    let rows = DMatrix::from_fn(q, d, |j, a| v[a * q + j]);
    let second = rows.transpose() * &rows / q as f64;
    let start = params_from_cov(&(psd_floor(&second, 1e-6 * second.trace().max(1e-8) / d as f64).0));
    let kron = |s: &DMatrix<f64>| -> DMatrix<f64> { DMatrix::from_fn(d * q, d * q, |r, c| if r % q == c % q { s[(r / q, c / q)] } else { 0.0 }) };
    let build = |theta: &[f64]| -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let l = chol_from_params(theta, d);
        let g = kron(&(&l * l.transpose()));
        let mut dg = Vec::with_capacity(theta.len());
        for i in 0..d {
            for j in 0..=i {
                // ∂Σ/∂L_ij = e_i (L row j)ᵀ + (L row j) e_iᵀ, times L_ii for log-diagonal entries.
                let mut dl = DMatrix::zeros(d, d);
                dl[(i, j)] = if i == j { l[(i, i)] } else { 1.0 };
                let ds = &dl * l.transpose() + &l * dl.transpose();
                dg.push(kron(&ds));
            }
        }
        (g, dg)
    };
    let (theta, value, grad_norm, converged) = maximise_structured(v, &sv, &start, &build);
    let l = chol_from_params(&theta, d);
    let mut sigma = &l * l.transpose();
    linalg::symmetrize(&mut sigma);
    let boundary = linalg::min_eigenvalue(&sigma) < SIGMA2_FLOOR;
    Ok((sigma.clone(), CovarianceEstimate { matrices: vec![sigma], boundary, converged, grad_norm, repaired, objective: value }))
}

/// Variance components θ_r of G = Σ_r θ_r K_r.
pub fn estimate_variance_components(v: &DVector<f64>, sigma_v: &DMatrix<f64>, kernels: &[DMatrix<f64>]) -> Result<(Vec<f64>, CovarianceEstimate)> {
    let (sv, repaired) = psd_floor(sigma_v, PSD_FLOOR);
    let total = sigma2_max(v).max(1e-6);
    let start: Vec<f64> = kernels.iter().map(|_| ((total - 1.0) / 1e6 / kernels.len() as f64).max(1e-4).ln()).collect();
    let build = |theta: &[f64]| -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let mut g = DMatrix::zeros(v.len(), v.len());
        let mut dg = Vec::with_capacity(theta.len());
        for (t, kr) in theta.iter().zip(kernels) {
            let e = t.exp();
            g += kr * e;
            dg.push(kr * e);
        }
        (g, dg)
    };
    let (theta, value, grad_norm, converged) = maximise_structured(v, &sv, &start, &build);
    let mut boundary = false;
    let vals: Vec<f64> = theta
        .iter()
        .map(|t| {
            let e = t.exp();
            if e < SIGMA2_FLOOR {
                boundary = true;
                SIGMA2_FLOOR
            } else {
                e
            }
        })
        .collect();
    let matrices = vals.iter().map(|&s| DMatrix::from_element(1, 1, s)).collect();
    Ok((vals, CovarianceEstimate { matrices, boundary, converged, grad_norm, repaired, objective: value }))
}

/// Layout of the random-component covariance.
#[derive(Debug, Clone)]
pub enum CovStructure {
    /// One component, one marginal.
    Univariate,
    /// One component, `d` marginals: G = Σ ⊗ I_q.
    Multivariate { d: usize },
    /// Several univariate components: G = Σ_r θ_r K_r.
    Components { kernels: Vec<DMatrix<f64>> },
}

pub fn estimate_covariance_general(
    b_hat: &DVector<f64>,
    sigma_b: &DMatrix<f64>,
    random_dist: RandomDist,
    structure: &CovStructure,
) -> Result<CovarianceEstimate> {
    match (structure, random_dist) {
        (CovStructure::Univariate, RandomDist::Gaussian) => {
            let f = estimate_variance_gaussian(b_hat, sigma_b)?;
            Ok(from_variance_fit(f))
        }
        (CovStructure::Univariate, RandomDist::StudentT { dof }) => {
            let f = estimate_variance_student_t(b_hat, sigma_b, dof, MC_POINTS)?;
            Ok(from_variance_fit(f))
        }
        (CovStructure::Multivariate { d: 1 }, _) => estimate_covariance_general(b_hat, sigma_b, random_dist, &CovStructure::Univariate),
        (CovStructure::Multivariate { d }, RandomDist::Gaussian) => Ok(estimate_covariance_multivariate(b_hat, sigma_b, *d)?.1),
        (CovStructure::Components { kernels }, RandomDist::Gaussian) => Ok(estimate_variance_components(b_hat, sigma_b, kernels)?.1),
        (_, RandomDist::StudentT { .. }) => Err(Error::Unsupported(
            "student-t components are supported for a single univariate component only".into(),
        )),
    }
}

fn from_variance_fit(f: VarianceFit) -> CovarianceEstimate {
    CovarianceEstimate {
        matrices: vec![DMatrix::from_element(1, 1, f.sigma2)],
        boundary: f.boundary,
        converged: true,
        grad_norm: 0.0,
        repaired: f.repaired,
        objective: f.objective,
    }
}

/// Covariance estimation for a fitted design. `b_active[marginal][a]` and
/// `sigma_b[marginal]` refer to the active components.
pub(crate) fn estimate(
    design: &Design,
    active: &[usize],
    b_active: &[Vec<DVector<f64>>],
    sigma_b: &[DMatrix<f64>],
) -> Result<CovarianceEstimate> {
    let cs = &design.clusters;
    let d = design.dim();
    if d > 1 {
        let v = DVector::from_iterator(
            b_active.iter().map(|b| b[0].len()).sum(),
            b_active.iter().flat_map(|b| b[0].iter().copied()),
        );
        let sv = linalg::block_diag(sigma_b);
        return estimate_covariance_general(&v, &sv, design.random_dist, &CovStructure::Multivariate { d });
    }
    if active.len() == 1 && cs.nesting.is_empty() {
        return estimate_covariance_general(&b_active[0][0], &sigma_b[0], design.random_dist, &CovStructure::Univariate);
    }
    // Several components: kernels on the stacked active vector.
    let sizes: Vec<usize> = active.iter().map(|&r| cs.components[r].n_clusters).collect();
    let total: usize = sizes.iter().sum();
    let mut kernels = vec![DMatrix::zeros(total, total); cs.components.len()];
    let mut at = 0;
    for (a, &r) in active.iter().enumerate() {
        let q = sizes[a];
        // Indicator from the active clusters to each ancestor's clusters.
        let mut map: Vec<usize> = (0..q).collect();
        let mut comp = r;
        loop {
            let qc = cs.components[comp].n_clusters;
            let mut ind = DMatrix::zeros(q, qc);
            for (j, &p) in map.iter().enumerate() {
                ind[(j, p)] = 1.0;
            }
            kernels[comp].view_mut((at, at), (q, q)).copy_from(&(&ind * ind.transpose()));
            match cs.parent_of(comp) {
                Some(n) => {
                    map = map.iter().map(|&j| n.map[j]).collect();
                    comp = n.parent;
                }
                None => break,
            }
        }
        at += q;
    }
    let v = DVector::from_iterator(total, b_active[0].iter().flat_map(|b| b.iter().copied()));
    estimate_covariance_general(&v, &sigma_b[0], design.random_dist, &CovStructure::Components { kernels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn two_cluster_example_has_sigma2_three() {
        let b = DVector::from_vec(vec![2.0, -2.0]);
        let f = estimate_variance_gaussian(&b, &DMatrix::identity(2, 2)).unwrap();
        assert!((f.sigma2 - 3.0).abs() < 1e-8, "{}", f.sigma2);
        assert!(!f.boundary);
    }

    #[test]
    fn zero_prediction_hits_floor() {
        let f = estimate_variance_gaussian(&DVector::zeros(4), &(DMatrix::identity(4, 4) * 0.1)).unwrap();
        assert!(f.boundary);
        assert_eq!(f.sigma2, SIGMA2_FLOOR);
    }

    #[test]
    fn closed_form_equals_marginal_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for q in 1..5 {
            let a = DMatrix::from_fn(q, q, |_, _| rng.random::<f64>() - 0.5);
            let s = &a * a.transpose() + DMatrix::identity(q, q) * 0.3;
            let b = DVector::from_fn(q, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let s2 = 0.1 + rng.random::<f64>();
            let lhs = varint_closed_form(&b, &s, s2).unwrap();
            let rhs = log_objective(&b, &s, s2).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn scale_equivariance() {
        let b = DVector::from_vec(vec![0.4, -0.1, 0.9, -1.2, 0.0]);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![0.05, 0.02, 0.03, 0.04, 0.01]));
        let f1 = estimate_variance_gaussian(&b, &s).unwrap();
        let c = 3.0;
        let f2 = estimate_variance_gaussian(&(&b * c), &(&s * (c * c))).unwrap();
        assert!((f2.sigma2 - c * c * f1.sigma2).abs() < 1e-8 * f2.sigma2);
    }

    #[test]
    fn local_maximum_has_negative_curvature() {
        let b = DVector::from_vec(vec![0.4, -0.1, 0.9, -1.2, 0.0]);
        let s = DMatrix::identity(5, 5) * 0.05;
        let f = estimate_variance_gaussian(&b, &s).unwrap();
        let g = |x: f64| log_objective(&b, &s, x).unwrap();
        let h = 1e-4 * f.sigma2;
        let second = (g(f.sigma2 + h) - 2.0 * g(f.sigma2) + g(f.sigma2 - h)) / (h * h);
        assert!(second <= 0.0);
    }

    #[test]
    fn tiny_sigma_b_recovers_second_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = 40;
        let rows = DMatrix::from_fn(q, 2, |_, c| (rng.random::<f64>() - 0.5) * if c == 0 { 2.0 } else { 1.0 });
        let v = DVector::from_iterator(2 * q, rows.column(0).iter().chain(rows.column(1).iter()).copied());
        let (sigma, _) = estimate_covariance_multivariate(&v, &(DMatrix::identity(2 * q, 2 * q) * 1e-6), 2).unwrap();
        let second = rows.transpose() * &rows / q as f64;
        assert!((sigma - second).abs().max() < 1e-3);
    }

    #[test]
    fn univariate_dispatch_matches_direct() {
        let b = DVector::from_vec(vec![0.3, -0.5, 0.2]);
        let s = DMatrix::identity(3, 3) * 0.01;
        let direct = estimate_variance_gaussian(&b, &s).unwrap().sigma2;
        let gen = estimate_covariance_general(&b, &s, RandomDist::Gaussian, &CovStructure::Multivariate { d: 1 }).unwrap();
        assert_eq!(gen.matrices[0][(0, 0)], direct);
    }
}
