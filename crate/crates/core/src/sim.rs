//! Simulation harness: reproducible random streams, data generation for the
//! bivariate Gaussian/Poisson model, an adaptive Gauss–Hermite likelihood
//! oracle and the two simulation studies.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{self, FitOptions};
use crate::family::{Family, Link};
use crate::laplace::{self, LaplaceOptions};
use crate::model::{ClusterComponent, ClusterSpec, ClusterStructure, Design, MarginalDesign, MarginalSpec, ModelSpec, RandomDist};
use crate::optim::{bfgs, BfgsOptions};

pub const STREAM_COMPONENTS: u64 = 2;
pub const STREAM_RESPONSES: u64 = 3;

/// Generator keyed by (seed, replicate, stream); replicates never share state
/// and can be drawn in any order.
pub fn stream_rng(seed: u64, replicate: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replicate.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// `q` independent rows with covariance `sigma` (d × d): Gaussian, or
/// multivariate t scaled to the same covariance.
pub fn draw_random_rows<R: Rng + ?Sized>(rng: &mut R, q: usize, sigma: &DMatrix<f64>, dist: RandomDist) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    if sigma.ncols() != d || sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("covariance must be a finite square matrix"));
    }
    let eig = SymmetricEigen::new(sigma.clone());
    if eig.eigenvalues.iter().any(|&v| v < -1e-12 * eig.eigenvalues.amax().max(1.0)) {
        return Err(Error::domain("covariance is not positive semi-definite"));
    }
    // Cholesky when possible (stable draws across tiny perturbations),
    // symmetric square root otherwise.
    let root = match sigma.clone().cholesky() {
        Some(c) => c.l(),
        None => &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt())),
    };
    let chi = match dist {
        RandomDist::Gaussian => None,
        RandomDist::StudentT { dof } => {
            if !(dof > 2.0) {
                return Err(Error::config("student-t degrees of freedom must exceed 2"));
            }
            Some((dof, ChiSquared::new(dof).map_err(|e| Error::domain(e.to_string()))?))
        }
    };
    let mut out = DMatrix::zeros(q, d);
    let mut z = DVector::zeros(d);
    for l in 0..q {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let mut row = &root * &z;
        if let Some((dof, chi)) = &chi {
            let w: f64 = chi.sample(rng);
            row *= ((dof - 2.0) / w).sqrt();
        }
        out.set_row(l, &row.transpose());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub beta: [f64; 2],
    pub sigma_base: [[f64; 2]; 2],
    pub const_grid: Vec<f64>,
    pub q: usize,
    pub q_grid: Vec<usize>,
    pub cluster_size: usize,
    pub replicates: usize,
    pub gaussian_cond_var: f64,
    pub seed: u64,
    pub random_dist: RandomDist,
    /// Gauss–Hermite nodes for the quadrature method.
    pub nodes: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            beta: [1.90, 0.21],
            sigma_base: [[0.28, 0.09], [0.09, 0.12]],
            const_grid: vec![1.0, 50.0, 100.0],
            q: 60,
            q_grid: vec![10, 50, 100],
            cluster_size: 200,
            replicates: 500,
            gaussian_cond_var: 0.5,
            seed: 20_240_601,
            random_dist: RandomDist::Gaussian,
            nodes: 20,
        }
    }
}

impl SimConfig {
    pub fn sigma_base(&self) -> DMatrix<f64> {
        DMatrix::from_fn(2, 2, |i, j| self.sigma_base[i][j])
    }

    pub fn check(&self) -> Result<()> {
        let s = self.sigma_base();
        if (s[(0, 1)] - s[(1, 0)]).abs() > 0.0 || s.cholesky().is_none() {
            return Err(Error::config("sigma_base must be symmetric positive definite"));
        }
        if self.const_grid.is_empty() || self.const_grid.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::config("const_grid must hold positive multipliers"));
        }
        if self.q < 2 || self.q_grid.is_empty() || self.q_grid.iter().any(|&q| q < 2) {
            return Err(Error::config("cluster counts must be at least 2"));
        }
        if self.cluster_size == 0 || self.replicates == 0 {
            return Err(Error::config("cluster_size and replicates must be positive"));
        }
        if !(self.gaussian_cond_var > 0.0) {
            return Err(Error::config("gaussian_cond_var must be positive"));
        }
        if self.nodes < 1 {
            return Err(Error::config("nodes must be positive"));
        }
        if let RandomDist::StudentT { dof } = self.random_dist {
            if !(dof > 4.0) {
                return Err(Error::config("student-t degrees of freedom must exceed 4"));
            }
        }
        Ok(())
    }

    /// Intercept-only Gaussian (identity) and Poisson (log) marginals sharing
    /// one cluster column.
    pub fn model(&self) -> ModelSpec {
        ModelSpec {
            marginals: vec![
                MarginalSpec::new("y1", Family::Normal).with_link(Link::Identity),
                MarginalSpec::new("y2", Family::Poisson).with_link(Link::Log),
            ],
            clusters: vec![ClusterSpec { name: "cluster".into(), column: "cluster".into(), nested_in: None }],
            random_dist: self.random_dist,
        }
    }
}

/// One simulated dataset: cluster labels 1..=q, `cluster_size` rows each.
pub fn simulate_dataset(sim: &SimConfig, c: f64, q: usize, replicate: u64) -> Result<Dataset> {
    let (rows, y1, y2) = simulate_raw(sim, c, q, replicate)?;
    Dataset::new()
        .with_labels("cluster", &rows.iter().map(|&l| l + 1).collect::<Vec<_>>())?
        .with_numeric("y1", y1)?
        .with_numeric("y2", y2)
}

fn simulate_raw(sim: &SimConfig, c: f64, q: usize, replicate: u64) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let sigma = sim.sigma_base() * c;
    if sigma.clone().cholesky().is_none() {
        return Err(Error::domain("scaled covariance is not positive definite"));
    }
    let mut brng = stream_rng(sim.seed, replicate, STREAM_COMPONENTS);
    let b = draw_random_rows(&mut brng, q, &sigma, sim.random_dist)?;
    let mut yrng = stream_rng(sim.seed, replicate, STREAM_RESPONSES);
    let n = q * sim.cluster_size;
    let mut clusters = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    for l in 0..q {
        let mu1 = sim.beta[0] + b[(l, 0)];
        let mu2 = (sim.beta[1] + b[(l, 1)]).exp();
        for _ in 0..sim.cluster_size {
            clusters.push(l);
            y1.push(Family::Normal.sample(mu1, sim.gaussian_cond_var, 1.0, &mut yrng)?);
            y2.push(Family::Poisson.sample(mu2, 1.0, 1.0, &mut yrng)?);
        }
    }
    Ok((clusters, y1, y2))
}

/// The design of a simulated dataset, built without going through text.
pub fn simulate_design(sim: &SimConfig, c: f64, q: usize, replicate: u64) -> Result<Design> {
    let (clusters, y1, y2) = simulate_raw(sim, c, q, replicate)?;
    let n = clusters.len();
    let ones = DMatrix::from_element(n, 1, 1.0);
    let m1 = MarginalDesign::new("y1", Family::Normal, Link::Identity, DVector::from_vec(y1), ones.clone());
    let m2 = MarginalDesign::new("y2", Family::Poisson, Link::Log, DVector::from_vec(y2), ones);
    let mut design = Design::new(vec![m1, m2], crate::model::ClusterStructure::single(ClusterComponent::from_indices("cluster", clusters, q)));
    design.random_dist = sim.random_dist;
    Ok(design)
}

/// Gauss–Hermite nodes and log-weights for the weight function e^{−x²}
/// (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut t = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        t[(k, k - 1)] = off;
        t[(k - 1, k)] = off;
    }
    let eig = SymmetricEigen::new(t);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], 0.5 * std::f64::consts::PI.ln() + 2.0 * v0.abs().max(1e-300).ln())
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[derive(Debug, Clone)]
pub struct QuadratureFit {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub lambda: f64,
    pub loglik: f64,
    /// Standard errors of β from the observed information.
    pub beta_se: DVector<f64>,
    pub boundary: bool,
    pub converged: bool,
}

const QUAD_LOG_SIGMA2_MIN: f64 = -27.6; // ln 1e-12

/// Per-cluster marginal log-likelihood by adaptive Gauss–Hermite quadrature.
struct Quadrature<'a> {
    m: &'a MarginalDesign,
    members: Vec<Vec<usize>>,
    nodes: Vec<f64>,
    log_w: Vec<f64>,
}

/// The b-dependent part of one cluster's log-likelihood, −Σ w d(y, µ) / (2λ).
/// Canonical Poisson and Gaussian clusters reduce to sufficient statistics.
enum Kernel<'a> {
    /// Σw(y ln y − y − yη₀), Σwy, Σwe^{η₀}, Σwyx, Σwe^{η₀}x.
    Poisson { c: f64, sy: f64, se: f64, sxy: DVector<f64>, sxe: DVector<f64>, lambda: f64 },
    /// Σw, Σwr, Σwr², Σwx, Σwrx with r = y − η₀.
    Normal { s0: f64, s1: f64, s2: f64, sx: DVector<f64>, sxr: DVector<f64>, lambda: f64 },
    General { q: &'a Quadrature<'a>, members: &'a [usize], eta0: &'a DVector<f64>, lambda: f64 },
}

impl Kernel<'_> {
    fn value(&self, b: f64) -> f64 {
        match *self {
            Kernel::Poisson { c, sy, se, lambda, .. } => -(c - b * sy + se * b.exp()) / lambda,
            Kernel::Normal { s0, s1, s2, lambda, .. } => -(s2 - 2.0 * b * s1 + b * b * s0) / (2.0 * lambda),
            Kernel::General { q, members, eta0, lambda } => {
                let m = q.m;
                let mut dev = 0.0;
                for &i in members {
                    let eta = eta0[i] + b;
                    if !m.link.in_range(eta) {
                        return f64::NEG_INFINITY;
                    }
                    let mu = m.link.inverse(eta);
                    if !m.family.in_mean_space(mu) {
                        return f64::NEG_INFINITY;
                    }
                    dev += m.weights[i] * m.family.deviance_raw(m.y[i], mu);
                }
                -dev / (2.0 * lambda)
            }
        }
    }

    /// First derivative and a positive curvature (observed, or expected where
    /// the observed one is not positive).
    fn slope_curvature(&self, b: f64) -> (f64, f64) {
        match *self {
            Kernel::Poisson { sy, se, lambda, .. } => ((sy - se * b.exp()) / lambda, se * b.exp() / lambda),
            Kernel::Normal { s0, s1, lambda, .. } => ((s1 - b * s0) / lambda, s0 / lambda),
            Kernel::General { q, members, eta0, lambda } => {
                let m = q.m;
                let (mut g, mut h) = (0.0, 0.0);
                for &i in members {
                    let mu = m.link.inverse(eta0[i] + b);
                    let (u, hh, ff) = estimator::obs_terms(m.family, m.link, m.y[i], mu, m.weights[i]);
                    // obs_terms differentiates the weighted deviance, −2λ times the log density.
                    g -= u / (2.0 * lambda);
                    h += if hh > 0.0 { hh } else { ff } / (2.0 * lambda);
                }
                (g, h)
            }
        }
    }

    /// Gradient of the kernel with respect to β at offset b.
    fn beta_gradient(&self, b: f64) -> DVector<f64> {
        match self {
            Kernel::Poisson { sxy, sxe, lambda, .. } => (sxy - sxe * b.exp()) / *lambda,
            Kernel::Normal { sx, sxr, lambda, .. } => (sxr - sx * b) / *lambda,
            Kernel::General { q, members, eta0, lambda } => {
                let m = q.m;
                let mut g = DVector::zeros(m.k());
                for &i in members.iter() {
                    let mu = m.link.inverse(eta0[i] + b);
                    let (u, _, _) = estimator::obs_terms(m.family, m.link, m.y[i], mu, m.weights[i]);
                    g -= m.x.row(i).transpose() * (u / (2.0 * lambda));
                }
                g
            }
        }
    }

    /// A starting point for the mode search.
    fn start(&self) -> f64 {
        match *self {
            // The unpenalised Poisson mode; the concave score makes Newton
            // monotone from here.
            Kernel::Poisson { sy, se, .. } if sy > 0.0 && se > 0.0 => (sy / se).ln(),
            Kernel::Normal { s0, s1, .. } if s0 > 0.0 => s1 / s0,
            _ => 0.0,
        }
    }
}

impl<'a> Quadrature<'a> {
    fn kernel(&'a self, members: &'a [usize], eta0: &'a DVector<f64>, lambda: f64) -> Kernel<'a> {
        let m = self.m;
        let k = m.k();
        match (m.family, m.link) {
            (Family::Poisson, Link::Log) => {
                let (mut c, mut sy, mut se) = (0.0, 0.0, 0.0);
                let (mut sxy, mut sxe) = (DVector::zeros(k), DVector::zeros(k));
                for &i in members {
                    let (w, y, e) = (m.weights[i], m.y[i], eta0[i]);
                    let ylny = if y > 0.0 { y * y.ln() } else { 0.0 };
                    let ee = w * e.exp();
                    c += w * (ylny - y - y * e);
                    sy += w * y;
                    se += ee;
                    for p in 0..k {
                        sxy[p] += w * y * m.x[(i, p)];
                        sxe[p] += ee * m.x[(i, p)];
                    }
                }
                Kernel::Poisson { c, sy, se, sxy, sxe, lambda }
            }
            (Family::Normal, Link::Identity) => {
                let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                let (mut sx, mut sxr) = (DVector::zeros(k), DVector::zeros(k));
                for &i in members {
                    let (w, r) = (m.weights[i], m.y[i] - eta0[i]);
                    s0 += w;
                    s1 += w * r;
                    s2 += w * r * r;
                    for p in 0..k {
                        sx[p] += w * m.x[(i, p)];
                        sxr[p] += w * r * m.x[(i, p)];
                    }
                }
                Kernel::Normal { s0, s1, s2, sx, sxr, lambda }
            }
            _ => Kernel::General { q: self, members, eta0, lambda },
        }
    }

    /// Mode and curvature of h(b) = kernel(b) − b²/(2σ²).
    fn mode(kernel: &Kernel, sigma2: f64) -> (f64, f64) {
        let h_value = |b: f64| kernel.value(b) - 0.5 * b * b / sigma2;
        let mut b = kernel.start();
        if !h_value(b).is_finite() {
            b = 0.0;
        }
        let mut curv = 1.0 / sigma2;
        for _ in 0..200 {
            let (g, h) = kernel.slope_curvature(b);
            let (g, h) = (g - b / sigma2, h + 1.0 / sigma2);
            curv = h;
            let step = g / h;
            let mut t = 1.0;
            let base = h_value(b);
            let mut moved = false;
            for _ in 0..60 {
                let cand = b + t * step;
                if h_value(cand) >= base {
                    b = cand;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved || (t * step).abs() < 1e-12 * (1.0 + b.abs()) {
                break;
            }
        }
        let (_, h) = kernel.slope_curvature(b);
        (b, curv.max(h + 1.0 / sigma2))
    }

    /// Marginal log-likelihood at (β, log σ², λ) and its gradient with
    /// respect to (β, log σ², log λ). The gradient differentiates the
    /// integrand at fixed nodes, which matches the derivative of the exact
    /// integral to quadrature accuracy.
    fn loglik(&self, beta: &DVector<f64>, log_sigma2: f64, lambda: f64) -> (f64, Vec<f64>) {
        let k = self.m.k();
        let clamped = log_sigma2 < QUAD_LOG_SIGMA2_MIN;
        let sigma2 = log_sigma2.max(QUAD_LOG_SIGMA2_MIN).exp();
        let eta0 = &self.m.x * beta;
        let mut total = 0.0;
        let mut g_lambda = 0.0;
        for i in 0..self.m.n() {
            let (y, w) = (self.m.y[i], self.m.weights[i]);
            total += self.m.family.log_normalizer(y, lambda, w);
            g_lambda += self.m.family.log_normalizer_dlog_lambda(lambda, w);
        }
        let mut g_beta = DVector::zeros(k);
        let mut g_sigma = 0.0;
        let log_prior_const = -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
        let mut terms = Vec::with_capacity(self.nodes.len());
        let mut points = Vec::with_capacity(self.nodes.len());
        for members in &self.members {
            let kernel = self.kernel(members, &eta0, lambda);
            let (bhat, curv) = Self::mode(&kernel, sigma2);
            let s = 1.0 / curv.max(1e-300).sqrt();
            terms.clear();
            points.clear();
            for (x, lw) in self.nodes.iter().zip(&self.log_w) {
                let b = bhat + std::f64::consts::SQRT_2 * s * x;
                let kv = kernel.value(b);
                let v = kv - 0.5 * b * b / sigma2 + log_prior_const;
                terms.push(lw + x * x + v);
                points.push((b, kv));
            }
            let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return (f64::NEG_INFINITY, vec![0.0; k + 2]);
            }
            let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
            total += max + sum.ln() + (std::f64::consts::SQRT_2 * s).ln();
            for (t, &(b, kv)) in terms.iter().zip(&points) {
                let p = (t - max).exp() / sum;
                if p < 1e-300 {
                    continue;
                }
                g_beta += kernel.beta_gradient(b) * p;
                g_sigma += p * (0.5 * b * b / sigma2 - 0.5);
                g_lambda -= p * kv;
            }
        }
        let mut grad: Vec<f64> = g_beta.iter().copied().collect();
        grad.push(if clamped { 0.0 } else { g_sigma });
        grad.push(g_lambda);
        (total, grad)
    }
}

/// Maximum marginal-likelihood fit of a univariate random-intercept model by
/// adaptive Gauss–Hermite quadrature.
pub fn quadrature_mle(m: &MarginalDesign, comp: &ClusterComponent, nodes: usize) -> Result<QuadratureFit> {
    if nodes == 0 {
        return Err(Error::config("at least one quadrature node is needed"));
    }
    let (xs, log_w) = gauss_hermite(nodes);
    let quad = Quadrature { m, members: comp.members(), nodes: xs, log_w };
    let k = m.k();
    let fixed_lambda = m.lambda_fixed();
    // Start from the Laplace fit when it is available, else from the GLM.
    let single = Design::new(vec![m.clone()], ClusterStructure::single(comp.clone()));
    let (beta0, sigma0, lambda0) = match laplace::fit_laplace_design(&single, &FitOptions::default(), &LaplaceOptions::default()) {
        Ok(f) => {
            let s = f.result.covariance.as_ref().map_or(0.1, |c| c.matrices[0][(0, 0)]);
            (f.result.beta(0).clone(), s, f.result.marginals[0].lambda)
        }
        Err(_) => {
            let (b, l) = estimator::glm_fit(m, &FitOptions::default())?;
            (b, 0.1, l)
        }
    };
    let mut x0: Vec<f64> = beta0.iter().copied().collect();
    x0.push(sigma0.max(1e-6).ln());
    if fixed_lambda.is_none() {
        x0.push(lambda0.max(1e-8).ln());
    }
    let unpack = |theta: &[f64]| -> (DVector<f64>, f64, f64) {
        let beta = DVector::from_column_slice(&theta[..k]);
        let lambda = fixed_lambda.unwrap_or_else(|| theta[k + 1].exp());
        (beta, theta[k], lambda)
    };
    let objective = |theta: &[f64]| -> (f64, Vec<f64>) {
        let (beta, ls, lambda) = unpack(theta);
        let (v, mut g) = quad.loglik(&beta, ls, lambda);
        if !v.is_finite() {
            return (f64::INFINITY, vec![0.0; theta.len()]);
        }
        g.truncate(theta.len());
        (-v, g.into_iter().map(|x| -x).collect())
    };
    let opts = BfgsOptions { grad_tol: 1e-6, max_iter: 500, f_tol: 1e-15, max_step: 2.0 };
    let mut min = bfgs(objective, &x0, opts);
    if min.x[k] < QUAD_LOG_SIGMA2_MIN {
        min.x[k] = QUAD_LOG_SIGMA2_MIN;
    }
    if !min.value.is_finite() {
        return Err(Error::NonConvergence("quadrature likelihood is not finite".into()));
    }
    let boundary = min.x[k] <= QUAD_LOG_SIGMA2_MIN + 1e-6 || min.x[k].exp() < 1e-8;
    // Observed information for β with σ² and λ held at their estimates, by
    // differencing the analytic gradient.
    let beta_se = {
        let mut hm = DMatrix::zeros(k, k);
        for j in 0..k {
            let h = 1e-5 * min.x[j].abs().max(1.0);
            let mut tp = min.x.clone();
            let mut tm = min.x.clone();
            tp[j] += h;
            tm[j] -= h;
            let (gp, gm) = (objective(&tp).1, objective(&tm).1);
            for i in 0..k {
                hm[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        crate::linalg::symmetrize(&mut hm);
        match crate::linalg::inverse(&hm) {
            Ok(inv) => inv.diagonal().map(|v| v.max(0.0).sqrt()),
            Err(_) => DVector::from_element(k, f64::NAN),
        }
    };
    let (beta, ls, lambda) = unpack(&min.x);
    Ok(QuadratureFit { beta, sigma2: ls.exp(), lambda, loglik: -min.value, beta_se, boundary, converged: min.converged })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMethod {
    Condinf,
    Laplace,
    Quadrature,
}

impl StudyMethod {
    pub fn id(self) -> &'static str {
        match self {
            StudyMethod::Condinf => "condinf",
            StudyMethod::Laplace => "laplace",
            StudyMethod::Quadrature => "quadrature",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Normality,
    Bias,
}

/// Parameters reported per replicate.
pub const PARAMETERS: [&str; 5] = ["beta1", "beta2", "Sigma11", "Sigma12", "Sigma22"];

fn truth(sim: &SimConfig, c: f64) -> [f64; 5] {
    let s = sim.sigma_base;
    [sim.beta[0], sim.beta[1], c * s[0][0], c * s[0][1], c * s[1][1]]
}

/// Estimates from one method on one dataset; `None` entries are not
/// estimated by that method.
pub fn fit_replicate(design: &Design, method: StudyMethod, nodes: usize) -> Result<[Option<f64>; 5]> {
    let opts = FitOptions::default();
    let from_fit = |beta1: f64, beta2: f64, s: &DMatrix<f64>| [Some(beta1), Some(beta2), Some(s[(0, 0)]), Some(s[(0, 1)]), Some(s[(1, 1)])];
    match method {
        StudyMethod::Condinf => {
            let f = estimator::fit_design(design, &opts)?;
            if !f.converged {
                return Err(Error::NonConvergence("conditional fit did not converge".into()));
            }
            let cov = f.covariance.as_ref().ok_or_else(|| Error::NonConvergence("no covariance".into()))?;
            Ok(from_fit(f.beta(0)[0], f.beta(1)[0], &cov.matrices[0]))
        }
        StudyMethod::Laplace => {
            let f = laplace::fit_laplace_design(design, &opts, &LaplaceOptions::default())?;
            if !f.result.converged {
                return Err(Error::NonConvergence("laplace fit did not converge".into()));
            }
            let cov = f.result.covariance.as_ref().expect("laplace always estimates Σ");
            Ok(from_fit(f.result.beta(0)[0], f.result.beta(1)[0], &cov.matrices[0]))
        }
        StudyMethod::Quadrature => {
            let comp = &design.clusters.components[0];
            let a = quadrature_mle(&design.marginals[0], comp, nodes)?;
            let b = quadrature_mle(&design.marginals[1], comp, nodes)?;
            Ok([Some(a.beta[0]), Some(b.beta[0]), None, None, None])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub constant: f64,
    pub q: usize,
    pub method: StudyMethod,
    pub replicate: usize,
    pub parameter: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub parameter: &'static str,
    pub q: usize,
    pub constant: f64,
    pub method: StudyMethod,
    pub truth: f64,
    pub bias: f64,
    pub se: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityRow {
    pub parameter: &'static str,
    pub constant: f64,
    pub method: StudyMethod,
    pub qq_correlation: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqRow {
    pub parameter: &'static str,
    pub constant: f64,
    pub method: StudyMethod,
    pub theoretical: f64,
    pub sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRow {
    pub constant: f64,
    pub q: usize,
    pub method: StudyMethod,
    pub failures: usize,
    pub replicates: usize,
    /// More than 10% of replicates failed.
    pub flagged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StudyOutput {
    pub estimates: Vec<EstimateRow>,
    pub bias: Vec<BiasRow>,
    pub normality: Vec<NormalityRow>,
    pub qq: Vec<QqRow>,
    pub failures: Vec<FailureRow>,
}

impl StudyOutput {
    /// Replicate values of one parameter in one cell, in replicate order.
    pub fn values(&self, method: StudyMethod, constant: f64, q: usize, parameter: &str) -> Vec<f64> {
        self.estimates
            .iter()
            .filter(|r| r.method == method && r.constant == constant && r.q == q && r.parameter == parameter)
            .map(|r| r.value)
            .collect()
    }
}

/// Blom plotting positions mapped to standard normal quantiles.
pub fn normal_scores(n: usize) -> Vec<f64> {
    let z = Normal::new(0.0, 1.0).expect("standard normal");
    (1..=n).map(|i| z.inverse_cdf((i as f64 - 0.375) / (n as f64 + 0.25))).collect()
}

/// Correlation between sorted values and their normal scores.
pub fn qq_correlation(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let z = normal_scores(v.len());
    pearson(&v, &z)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa * sbb).sqrt()
}

/// Mean and standard error of `values − truth`.
pub fn bias_and_se(values: &[f64], truth: f64) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { f64::NAN };
    (mean - truth, (var / n).sqrt())
}

/// Runs one study. Replicates run in parallel on the current rayon pool;
/// results are assembled in a fixed order.
pub fn run_study(kind: StudyKind, sim: &SimConfig, methods: &[StudyMethod]) -> Result<StudyOutput> {
    sim.check()?;
    if methods.is_empty() {
        return Err(Error::config("no study methods selected"));
    }
    let cells: Vec<(f64, usize)> = match kind {
        StudyKind::Normality => sim.const_grid.iter().map(|&c| (c, sim.q)).collect(),
        StudyKind::Bias => sim.q_grid.iter().map(|&q| (1.0, q)).collect(),
    };
    let mut out = StudyOutput::default();
    for &(c, q) in &cells {
        let per_rep: Vec<Vec<Option<[Option<f64>; 5]>>> = (0..sim.replicates)
            .into_par_iter()
            .map(|rep| {
                let design = simulate_design(sim, c, q, rep as u64);
                methods
                    .iter()
                    .map(|&meth| design.as_ref().ok().and_then(|d| fit_replicate(d, meth, sim.nodes).ok()))
                    .collect()
            })
            .collect();
        let truth = truth(sim, c);
        for (mi, &meth) in methods.iter().enumerate() {
            let mut failures = 0;
            for (rep, row) in per_rep.iter().enumerate() {
                match &row[mi] {
                    Some(vals) => {
                        for (p, v) in PARAMETERS.iter().zip(vals) {
                            if let Some(value) = v {
                                out.estimates.push(EstimateRow { constant: c, q, method: meth, replicate: rep, parameter: p, value: *value });
                            }
                        }
                    }
                    None => failures += 1,
                }
            }
            out.failures.push(FailureRow {
                constant: c,
                q,
                method: meth,
                failures,
                replicates: sim.replicates,
                flagged: failures as f64 > 0.1 * sim.replicates as f64,
            });
            for (pi, p) in PARAMETERS.iter().enumerate() {
                let vals = out.values(meth, c, q, p);
                if vals.is_empty() {
                    continue;
                }
                match kind {
                    StudyKind::Bias => {
                        let (bias, se) = bias_and_se(&vals, truth[pi]);
                        out.bias.push(BiasRow { parameter: p, q, constant: c, method: meth, truth: truth[pi], bias, se, n: vals.len() });
                    }
                    StudyKind::Normality => {
                        if pi >= 2 {
                            continue;
                        }
                        let mut sorted = vals.clone();
                        sorted.sort_by(f64::total_cmp);
                        for (t, s) in normal_scores(sorted.len()).into_iter().zip(&sorted) {
                            out.qq.push(QqRow { parameter: p, constant: c, method: meth, theoretical: t, sample: *s });
                        }
                        out.normality.push(NormalityRow { parameter: p, constant: c, method: meth, qq_correlation: qq_correlation(&vals), n: vals.len() });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bootstrap comparison of the median absolute bias (over parameters)
/// between two cells. Returns `(median_a, median_b, se of median_b − median_a)`.
pub fn median_abs_bias_bootstrap(
    a: &[(Vec<f64>, f64)],
    b: &[(Vec<f64>, f64)],
    n_boot: usize,
    seed: u64,
) -> (f64, f64, f64) {
    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
    fn med_abs_bias(cell: &[(Vec<f64>, f64)], idx: Option<&[Vec<usize>]>) -> f64 {
        median(
            cell.iter()
                .enumerate()
                .map(|(p, (vals, t))| {
                    let mean = match idx {
                        Some(ix) => ix[p].iter().map(|&i| vals[i]).sum::<f64>() / ix[p].len() as f64,
                        None => vals.iter().sum::<f64>() / vals.len() as f64,
                    };
                    (mean - t).abs()
                })
                .collect(),
        )
    }
    let ma = med_abs_bias(a, None);
    let mb = med_abs_bias(b, None);
    let mut rng = stream_rng(seed, 0, 7);
    let mut diffs = Vec::with_capacity(n_boot);
    let resample = |cell: &[(Vec<f64>, f64)], rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        // One index set per cell so parameters stay paired by replicate.
        let n = cell[0].0.len();
        let ix: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        cell.iter().map(|(v, _)| if v.len() == n { ix.clone() } else { (0..v.len()).map(|_| rng.random_range(0..v.len())).collect() }).collect()
    };
    for _ in 0..n_boot {
        let ia = resample(a, &mut rng);
        let ib = resample(b, &mut rng);
        diffs.push(med_abs_bias(b, Some(&ib)) - med_abs_bias(a, Some(&ia)));
    }
    let m = diffs.iter().sum::<f64>() / n_boot as f64;
    let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n_boot as f64 - 1.0)).sqrt();
    (ma, mb, sd)
}
