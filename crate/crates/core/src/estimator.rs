//! Conditional estimation of fixed effects and random components.
//!
//! The random components are treated as fixed unknowns of a conditional
//! model. Given `β` the components are predicted by maximising the
//! conditional likelihood and projecting onto the mean-zero subspace; given
//! the components, `β` and `λ` are re-estimated. The two steps alternate
//! until the parameters settle, after which a joint Newton polish on the
//! constrained system removes the residual error of the linear alternation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::asymptotics::{self, Mode};
use crate::covariance::{self, CovarianceEstimate};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::family::{Family, Link};
use crate::linalg;
use crate::model::{ClusterComponent, Design, MarginalDesign, ModelSpec};
use crate::optim::bracketed_root;

/// Bound on a per-cluster offset under log and logit links.
pub const OFFSET_CLAMP: f64 = 30.0;

const POLISH_MAX_DIM: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Max absolute change in (β, b, λ) across an outer iteration.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Max-norm of the score at which an inner Newton solve stops.
    pub inner_tol: f64,
    pub max_inner: usize,
    pub step_halving_max: usize,
    /// Estimate σ² / Σ after fitting.
    pub estimate_covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            outer_tol: 1e-8,
            max_outer: 200,
            inner_tol: 1e-10,
            max_inner: 100,
            step_halving_max: 30,
            estimate_covariance: true,
        }
    }
}

impl FitOptions {
    pub fn check(&self) -> Result<()> {
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0) {
            return Err(Error::config("tolerances must be positive"));
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.step_halving_max == 0 {
            return Err(Error::config("iteration limits must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Condinf,
    Laplace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearState {
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateCluster {
    pub component: usize,
    pub cluster: usize,
}

#[derive(Debug, Clone)]
pub struct MarginalFit {
    pub name: String,
    pub beta: DVector<f64>,
    pub beta_names: Vec<String>,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Max parameter change per outer iteration.
    pub trace: Vec<f64>,
    pub degenerate: Vec<DegenerateCluster>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: Method,
    pub marginals: Vec<MarginalFit>,
    /// `b[component][marginal]`, each mean zero.
    pub b: Vec<Vec<DVector<f64>>>,
    pub covariance: Option<CovarianceEstimate>,
    pub converged: bool,
    pub iterations: usize,
    /// Components entering the conditional fit (nesting parents excluded).
    pub active: Vec<usize>,
    /// Per marginal, the (β, b) pair at which the inference functions were
    /// solved, before nested components were split off.
    pub working: Vec<WorkingState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkingState {
    pub beta: DVector<f64>,
    /// One vector per active component.
    pub b: Vec<DVector<f64>>,
}

impl FitResult {
    pub fn beta(&self, marginal: usize) -> &DVector<f64> {
        &self.marginals[marginal].beta
    }

    /// σ² of a univariate single-component model.
    pub fn sigma2(&self) -> Option<f64> {
        self.covariance.as_ref().map(|c| c.matrices[0][(0, 0)])
    }
}

pub fn project_zero_mean(v: &DVector<f64>) -> DVector<f64> {
    if v.is_empty() {
        return v.clone();
    }
    let m = v.mean();
    v.map(|x| x - m)
}

/// η = Xβ + Σ_r Z_r b_r and µ = g⁻¹(η). The intercept and the cluster
/// offsets are added before the remaining covariates.
pub fn linear_predictor(
    beta: &DVector<f64>,
    b: &[DVector<f64>],
    x: &DMatrix<f64>,
    comps: &[&ClusterComponent],
    link: Link,
) -> Result<LinearState> {
    let (n, k) = x.shape();
    if beta.len() != k || b.len() != comps.len() {
        return Err(Error::domain("parameter dimensions do not match the design"));
    }
    for (bv, c) in b.iter().zip(comps) {
        if bv.len() != c.n_clusters || c.index.len() != n {
            return Err(Error::domain(format!("component '{}' does not match the design", c.name)));
        }
    }
    let mut eta = DVector::zeros(n);
    let mut mu = DVector::zeros(n);
    for i in 0..n {
        let mut e = if k > 0 { x[(i, 0)] * beta[0] } else { 0.0 };
        for (bv, c) in b.iter().zip(comps) {
            e += bv[c.index[i]];
        }
        for c in 1..k {
            e += x[(i, c)] * beta[c];
        }
        if !link.in_range(e) {
            return Err(Error::domain(format!("eta = {e} outside the range of the {link} link")));
        }
        eta[i] = e;
        mu[i] = link.inverse(e);
    }
    Ok(LinearState { eta, mu })
}

fn state(m: &MarginalDesign, comps: &[&ClusterComponent], beta: &DVector<f64>, b: &[DVector<f64>]) -> Result<LinearState> {
    let s = linear_predictor(beta, b, &m.x, comps, m.link)?;
    if let Some(bad) = s.mu.iter().find(|&&v| !m.family.in_mean_space(v)) {
        return Err(Error::domain(format!("mu = {bad} outside the {} mean space", m.family)));
    }
    Ok(s)
}

/// Per-observation score, observed and expected curvature on the η scale.
#[inline]
pub(crate) fn obs_terms(family: Family, link: Link, y: f64, mu: f64, w: f64) -> (f64, f64, f64) {
    let g1 = link.derivative(mu);
    let g2 = link.second_derivative(mu);
    let d1 = family.dmu_raw(y, mu);
    let d2 = family.d2mu_raw(y, mu);
    let score = w * d1 / g1;
    let hess = w * (d2 / (g1 * g1) - d1 * g2 / (g1 * g1 * g1));
    let fisher = 2.0 * w / (family.variance_raw(mu) * g1 * g1);
    (score, hess, fisher)
}

fn weighted_deviance(m: &MarginalDesign, mu: &DVector<f64>) -> f64 {
    (0..m.n()).map(|i| m.weights[i] * m.family.deviance_raw(m.y[i], mu[i])).sum()
}

/// Σ_i log f(y_i | b; β, λ).
pub fn conditional_loglik(m: &MarginalDesign, mu: &DVector<f64>, lambda: f64) -> f64 {
    let lambda = if m.family.dispersion_fixed() { 1.0 } else { lambda };
    (0..m.n())
        .map(|i| {
            let w = m.weights[i];
            m.family.log_normalizer(m.y[i], lambda, w) - w * m.family.deviance_raw(m.y[i], mu[i]) / (2.0 * lambda)
        })
        .sum()
}

/// ψ*_β = Σ x_i w_i d′(y_i; µ_i)/g′(µ_i) and ψ*_b per component.
pub fn inference_functions(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    beta: &DVector<f64>,
    b: &[DVector<f64>],
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    let s = state(m, comps, beta, b)?;
    let mut psi_beta = DVector::zeros(m.k());
    let mut psi_b: Vec<DVector<f64>> = comps.iter().map(|c| DVector::zeros(c.n_clusters)).collect();
    for i in 0..m.n() {
        let (u, _, _) = obs_terms(m.family, m.link, m.y[i], s.mu[i], m.weights[i]);
        for c in 0..m.k() {
            psi_beta[c] += m.x[(i, c)] * u;
        }
        for (r, comp) in comps.iter().enumerate() {
            psi_b[r][comp.index[i]] += u;
        }
    }
    Ok((psi_beta, psi_b))
}

/// Observed Jacobian of (ψ*_β, ψ*_b) with respect to (β, b), b stacked by component.
pub fn jacobian(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    beta: &DVector<f64>,
    b: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    let s = state(m, comps, beta, b)?;
    let k = m.k();
    let offsets = component_offsets(comps, k);
    let p = *offsets.last().unwrap();
    let mut j = DMatrix::zeros(p, p);
    for i in 0..m.n() {
        let (_, h, _) = obs_terms(m.family, m.link, m.y[i], s.mu[i], m.weights[i]);
        accumulate_obs(&mut j, &m.x, i, comps, &offsets, h, None);
    }
    mirror_lower(&mut j);
    Ok(j)
}

/// Start index of each component's block after the k fixed effects; the last
/// entry is the total dimension.
pub(crate) fn component_offsets(comps: &[&ClusterComponent], k: usize) -> Vec<usize> {
    let mut off = vec![k];
    for c in comps {
        off.push(off.last().unwrap() + c.n_clusters);
    }
    off
}

/// Add `h t tᵀ` to the lower triangle for observation `i`, where `t` stacks
/// x_i and the cluster indicators. `map` renumbers cluster coordinates
/// (None drops them).
pub(crate) fn accumulate_obs(
    j: &mut DMatrix<f64>,
    x: &DMatrix<f64>,
    i: usize,
    comps: &[&ClusterComponent],
    offsets: &[usize],
    h: f64,
    map: Option<&[Option<usize>]>,
) {
    let k = x.ncols();
    let pos: Vec<Option<usize>> = comps
        .iter()
        .enumerate()
        .map(|(r, c)| {
            let u = offsets[r] + c.index[i];
            match map {
                Some(mp) => mp[u],
                None => Some(u),
            }
        })
        .collect();
    for a in 0..k {
        let xa = x[(i, a)] * h;
        for bb in 0..=a {
            j[(a, bb)] += xa * x[(i, bb)];
        }
        for &u in pos.iter().flatten() {
            j[(u, a)] += xa;
        }
    }
    for (ri, &u) in pos.iter().enumerate() {
        let Some(u) = u else { continue };
        for &v in pos[..=ri].iter().flatten() {
            if v <= u {
                j[(u, v)] += h;
            } else {
                j[(v, u)] += h;
            }
        }
    }
}

pub(crate) fn mirror_lower(j: &mut DMatrix<f64>) {
    let p = j.nrows();
    for a in 0..p {
        for b in (a + 1)..p {
            j[(a, b)] = j[(b, a)];
        }
    }
}

fn clamps(link: Link) -> bool {
    matches!(link, Link::Log | Link::Logit)
}

/// Scores below this are indistinguishable from zero: the tolerance, or the
/// rounding error of terms of total magnitude `abs_sum` (each score term plus
/// its sensitivity to a rounding of η).
fn score_floor(tol: f64, abs_sum: f64) -> f64 {
    tol.max(64.0 * f64::EPSILON * abs_sum)
}

/// Step acceptance on the deviance. Within the rounding noise of the
/// deviance sum the score norm decides.
fn accept(dev_new: f64, dev: f64, score_new: f64, score: f64) -> bool {
    dev_new <= dev + 4.0 * f64::EPSILON * dev.abs() || (dev_new <= dev + 64.0 * f64::EPSILON * dev.abs() && score_new < score)
}

fn negligible(step: f64, at: f64) -> bool {
    step.abs() <= 1e-12 * (1.0 + at.abs())
}

fn stationary(g: &DVector<f64>, gabs: &DVector<f64>, tol: f64) -> bool {
    g.iter().zip(gabs.iter()).all(|(v, a)| v.abs() <= score_floor(tol, *a))
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Projected components.
    pub b: Vec<DVector<f64>>,
    pub degenerate: Vec<DegenerateCluster>,
    pub converged: bool,
    pub iterations: usize,
}

/// Fixed-effect part of the linear predictor.
fn fixed_part(m: &MarginalDesign, beta: &DVector<f64>) -> DVector<f64> {
    &m.x * beta
}

/// Π(argmax_b Σ log f(y | b; β)). `start` warm-starts the inner solves.
pub fn predict_b(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    beta: &DVector<f64>,
    start: &[DVector<f64>],
    opts: &FitOptions,
) -> Result<Prediction> {
    let eta0 = fixed_part(m, beta);
    let mut pred = if comps.len() == 1 {
        predict_single(m, comps[0], &eta0, &start[0], opts)?
    } else {
        predict_joint(m, comps, &eta0, start, opts)?
    };
    for v in pred.b.iter_mut() {
        *v = project_zero_mean(v);
    }
    Ok(pred)
}

struct ClusterSolve {
    b: f64,
    converged: bool,
    degenerate: bool,
    iterations: usize,
}

/// Sum of (deviance, score, observed curvature, expected curvature) over the
/// cluster at offset `b`; None if any mean leaves the mean space.
fn cluster_terms(m: &MarginalDesign, members: &[usize], eta0: &DVector<f64>, b: f64) -> Option<(f64, f64, f64, f64, f64)> {
    let (mut dev, mut s, mut h, mut f, mut sabs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &i in members {
        let eta = eta0[i] + b;
        if !m.link.in_range(eta) {
            return None;
        }
        let mu = m.link.inverse(eta);
        if !m.family.in_mean_space(mu) {
            return None;
        }
        let w = m.weights[i];
        dev += w * m.family.deviance_raw(m.y[i], mu);
        let (u, hh, ff) = obs_terms(m.family, m.link, m.y[i], mu, w);
        s += u;
        sabs += u.abs() + hh.abs() * eta.abs().max(1.0);
        h += hh;
        f += ff;
    }
    Some((dev, s, h, f, sabs))
}

/// Direction in which the cluster likelihood increases without bound: every
/// response on the same edge of the support.
fn unbounded_direction(m: &MarginalDesign, members: &[usize]) -> Option<f64> {
    let all = |v: f64| members.iter().all(|&i| m.y[i] == v);
    match m.family {
        Family::Poisson if all(0.0) => Some(-1.0),
        Family::Binomial if all(0.0) => Some(-1.0),
        Family::Binomial if all(1.0) => Some(1.0),
        _ => None,
    }
}

fn solve_cluster(m: &MarginalDesign, members: &[usize], eta0: &DVector<f64>, start: f64, opts: &FitOptions) -> Result<ClusterSolve> {
    let bound = clamps(m.link).then_some(OFFSET_CLAMP);
    if let (Some(c), Some(dir)) = (bound, unbounded_direction(m, members)) {
        return Ok(ClusterSolve { b: dir * c, converged: true, degenerate: true, iterations: 0 });
    }
    let clamp = |v: f64| bound.map_or(v, |c| v.clamp(-c, c));
    let mut b = clamp(start);
    let mut cur = cluster_terms(m, members, eta0, b);
    if cur.is_none() {
        b = 0.0;
        cur = cluster_terms(m, members, eta0, b);
    }
    let Some(mut cur) = cur else {
        return Err(Error::NonConvergence("no valid start for a cluster offset".into()));
    };
    for it in 0..opts.max_inner {
        let (dev, s, h, f, sabs) = cur;
        if s.abs() <= score_floor(opts.inner_tol, sabs) {
            return Ok(ClusterSolve { b, converged: true, degenerate: false, iterations: it });
        }
        let curv = if h > 0.0 { h } else { f };
        let step = -s / curv;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.step_halving_max {
            let cand = clamp(b + t * step);
            if cand == b {
                break;
            }
            if let Some(terms) = cluster_terms(m, members, eta0, cand) {
                if accept(terms.0, dev, terms.1.abs(), s.abs()) {
                    accepted = Some((cand, terms));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, terms)) => {
                b = cand;
                cur = terms;
            }
            None => {
                let at_bound = bound.is_some_and(|c| b.abs() == c);
                // A Newton step below the resolution of b cannot improve it.
                let small = s.abs() <= score_floor(10.0 * opts.inner_tol, sabs) || negligible(step, b);
                return Ok(ClusterSolve { b, converged: small || at_bound, degenerate: at_bound, iterations: it + 1 });
            }
        }
    }
    let converged = cur.1.abs() <= score_floor(10.0 * opts.inner_tol, cur.4);
    Ok(ClusterSolve { b, converged, degenerate: false, iterations: opts.max_inner })
}

fn predict_single(
    m: &MarginalDesign,
    comp: &ClusterComponent,
    eta0: &DVector<f64>,
    start: &DVector<f64>,
    opts: &FitOptions,
) -> Result<Prediction> {
    let members = comp.members();
    let mut b = DVector::zeros(comp.n_clusters);
    let mut degenerate = Vec::new();
    let mut converged = true;
    let mut iterations = 0;
    for (j, mem) in members.iter().enumerate() {
        let sol = solve_cluster(m, mem, eta0, start[j], opts)?;
        b[j] = sol.b;
        converged &= sol.converged;
        iterations = iterations.max(sol.iterations);
        if sol.degenerate {
            degenerate.push(DegenerateCluster { component: 0, cluster: j });
        }
    }
    Ok(Prediction { b: vec![b], degenerate, converged, iterations })
}

/// Joint damped Newton over several non-nested components. The first
/// component is free; the others are held in the mean-zero subspace so that
/// the system is non-singular.
fn predict_joint(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    eta0: &DVector<f64>,
    start: &[DVector<f64>],
    opts: &FitOptions,
) -> Result<Prediction> {
    let offsets = component_offsets(comps, 0);
    let p = *offsets.last().unwrap();
    let r_count = comps.len();
    let bound = clamps(m.link).then_some(OFFSET_CLAMP);
    let mut b: Vec<DVector<f64>> = start.iter().enumerate().map(|(r, v)| if r == 0 { v.clone() } else { project_zero_mean(v) }).collect();
    let empty_x = DMatrix::zeros(m.n(), 0);
    let eval = |b: &[DVector<f64>]| -> Option<(f64, DVector<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        let mut dev = 0.0;
        let mut g = DVector::zeros(p);
        let mut gabs = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        let mut f = DMatrix::zeros(p, p);
        for i in 0..m.n() {
            let mut eta = eta0[i];
            for (r, c) in comps.iter().enumerate() {
                eta += b[r][c.index[i]];
            }
            if !m.link.in_range(eta) {
                return None;
            }
            let mu = m.link.inverse(eta);
            if !m.family.in_mean_space(mu) {
                return None;
            }
            let w = m.weights[i];
            dev += w * m.family.deviance_raw(m.y[i], mu);
            let (u, hh, ff) = obs_terms(m.family, m.link, m.y[i], mu, w);
            for (r, c) in comps.iter().enumerate() {
                g[offsets[r] + c.index[i]] += u;
                gabs[offsets[r] + c.index[i]] += u.abs() + hh.abs() * eta.abs().max(1.0);
            }
            accumulate_obs(&mut h, &empty_x, i, comps, &offsets, hh, None);
            accumulate_obs(&mut f, &empty_x, i, comps, &offsets, ff, None);
        }
        mirror_lower(&mut h);
        mirror_lower(&mut f);
        Some((dev, g, h, f, gabs))
    };
    let Some(mut cur) = eval(&b) else {
        return Err(Error::NonConvergence("invalid start for the random components".into()));
    };
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_inner {
        let (dev, g, h, f, gabs) = &cur;
        if stationary(g, gabs, opts.inner_tol) {
            converged = true;
            break;
        }
        iterations += 1;
        let curv = if h.clone().cholesky().is_some() { h } else { f };
        let mut kkt = DMatrix::zeros(p + r_count - 1, p + r_count - 1);
        kkt.view_mut((0, 0), (p, p)).copy_from(curv);
        for r in 1..r_count {
            for u in offsets[r]..offsets[r + 1] {
                kkt[(p + r - 1, u)] = 1.0;
                kkt[(u, p + r - 1)] = 1.0;
            }
        }
        let mut rhs = DVector::zeros(p + r_count - 1);
        rhs.rows_mut(0, p).copy_from(&(-g));
        let step = linalg::solve(&kkt, &rhs)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.step_halving_max {
            let cand: Vec<DVector<f64>> = (0..r_count)
                .map(|r| {
                    let d = step.rows(offsets[r], comps[r].n_clusters);
                    let mut v = &b[r] + t * d;
                    if let Some(c) = bound {
                        v.apply(|x| *x = x.clamp(-c, c));
                    }
                    v
                })
                .collect();
            if let Some(next) = eval(&cand) {
                if accept(next.0, *dev, max_abs(&next.1), max_abs(g)) {
                    accepted = Some((cand, next));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, next)) => {
                let moved = cand.iter().zip(&b).any(|(a, c)| a != c);
                b = cand;
                cur = next;
                if !moved {
                    break;
                }
            }
            None => {
                let scale = b.iter().fold(0.0f64, |a, v| a.max(max_abs(v)));
                converged = step.iter().all(|v| negligible(*v, scale));
                break;
            }
        }
    }
    if !converged {
        converged = stationary(&cur.1, &cur.4, 10.0 * opts.inner_tol);
    }
    let mut degenerate = Vec::new();
    if let Some(c) = bound {
        for (r, v) in b.iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                if x.abs() >= c {
                    degenerate.push(DegenerateCluster { component: r, cluster: j });
                }
            }
        }
        converged |= !degenerate.is_empty();
    }
    Ok(Prediction { b, degenerate, converged, iterations })
}

/// Damped Newton on ψ*_β with the components held fixed.
pub fn update_beta(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    b: &[DVector<f64>],
    start: &DVector<f64>,
    opts: &FitOptions,
) -> Result<DVector<f64>> {
    let k = m.k();
    let eval = |beta: &DVector<f64>| -> Option<(f64, DVector<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        let s = state(m, comps, beta, b).ok()?;
        let mut g = DVector::zeros(k);
        let mut gabs = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        let mut f = DMatrix::zeros(k, k);
        let mut dev = 0.0;
        for i in 0..m.n() {
            let w = m.weights[i];
            dev += w * m.family.deviance_raw(m.y[i], s.mu[i]);
            let (u, hh, ff) = obs_terms(m.family, m.link, m.y[i], s.mu[i], w);
            for a in 0..k {
                let xa = m.x[(i, a)];
                g[a] += xa * u;
                gabs[a] += xa.abs() * (u.abs() + hh.abs() * s.eta[i].abs().max(1.0));
                for c in 0..=a {
                    h[(a, c)] += xa * m.x[(i, c)] * hh;
                    f[(a, c)] += xa * m.x[(i, c)] * ff;
                }
            }
        }
        mirror_lower(&mut h);
        mirror_lower(&mut f);
        Some((dev, g, h, f, gabs))
    };
    let mut beta = start.clone();
    let Some(mut cur) = eval(&beta) else {
        return Err(Error::NonConvergence("fixed effects left the valid region".into()));
    };
    for _ in 0..opts.max_inner {
        let (dev, g, h, f, gabs) = &cur;
        if stationary(g, gabs, opts.inner_tol) {
            break;
        }
        let curv = if h.clone().cholesky().is_some() { h } else { f };
        let step = linalg::solve(curv, &(-g))?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.step_halving_max {
            let cand = &beta + t * &step;
            if let Some(next) = eval(&cand) {
                if accept(next.0, *dev, max_abs(&next.1), max_abs(g)) {
                    accepted = Some((cand, next));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, next)) = accepted else {
            let scale = max_abs(&beta);
            if stationary(g, gabs, 1e3 * opts.inner_tol) || step.iter().all(|v| negligible(*v, scale)) {
                break;
            }
            return Err(Error::NonConvergence(format!(
                "fixed-effect step failed after {} halvings",
                opts.step_halving_max
            )));
        };
        let moved = cand != beta;
        beta = cand;
        cur = next;
        if !moved {
            break;
        }
    }
    Ok(beta)
}

/// Maximiser of Σ log f(y_i; µ_i, λ) in λ at fixed means.
pub fn estimate_lambda(m: &MarginalDesign, mu: &DVector<f64>) -> f64 {
    if let Some(l) = m.lambda_fixed() {
        return l;
    }
    let n = m.n() as f64;
    let devs: Vec<f64> = (0..m.n()).map(|i| m.family.deviance_raw(m.y[i], mu[i])).collect();
    let total: f64 = devs.iter().zip(m.weights.iter()).map(|(d, w)| w * d).sum();
    let floor = 1e-300;
    match m.family {
        Family::Gamma => {
            if total <= 0.0 {
                return floor;
            }
            // Score in log λ: Σ w (ln ν − ψ(ν) − d/2), ν = w/λ.
            let score = |log_lambda: f64| -> f64 {
                let lambda = log_lambda.exp();
                devs.iter()
                    .zip(m.weights.iter())
                    .map(|(d, w)| {
                        let nu = w / lambda;
                        w * (nu.ln() - digamma(nu) - d / 2.0)
                    })
                    .sum()
            };
            let guess = (total / n).max(1e-12).ln();
            let (mut lo, mut hi) = (guess - 2.0, guess + 2.0);
            while score(lo) > 0.0 && lo > -700.0 {
                lo -= 4.0;
            }
            while score(hi) < 0.0 && hi < 700.0 {
                hi += 4.0;
            }
            bracketed_root(score, lo, hi, 1e-14).map_or((total / n).max(floor), f64::exp)
        }
        _ => (total / n).max(floor),
    }
}

/// Iteratively reweighted least squares for the fixed-effects-only model.
pub fn glm_fit(m: &MarginalDesign, opts: &FitOptions) -> Result<(DVector<f64>, f64)> {
    let n = m.n();
    let k = m.k();
    let ybar = m.y.iter().zip(m.weights.iter()).map(|(y, w)| y * w).sum::<f64>() / m.weights.sum();
    let mut mu: DVector<f64> = DVector::from_fn(n, |i, _| {
        let y = m.y[i];
        let w = m.weights[i];
        let start = match m.family {
            Family::Poisson => y + 0.1,
            Family::Binomial => (w * y + 0.5) / (w + 1.0),
            _ => y,
        };
        if m.family.in_mean_space(start) && m.link.in_domain(start) {
            start
        } else {
            ybar
        }
    });
    if mu.iter().any(|&v| !(m.family.in_mean_space(v) && m.link.in_domain(v))) {
        return Err(Error::NonConvergence("no valid starting means for the GLM fit".into()));
    }
    let mut eta = mu.map(|v| m.link.apply(v));
    let mut beta = DVector::zeros(k);
    let mut dev_old = f64::INFINITY;
    for it in 0..100 {
        let mut xtwx = DMatrix::zeros(k, k);
        let mut xtwz = DVector::zeros(k);
        for i in 0..n {
            let g1 = m.link.derivative(mu[i]);
            let w = m.weights[i] / (m.family.variance_raw(mu[i]) * g1 * g1);
            let z = eta[i] + (m.y[i] - mu[i]) * g1;
            for a in 0..k {
                let xa = m.x[(i, a)] * w;
                xtwz[a] += xa * z;
                for c in 0..=a {
                    xtwx[(a, c)] += xa * m.x[(i, c)];
                }
            }
        }
        mirror_lower(&mut xtwx);
        let mut cand = linalg::solve(&xtwx, &xtwz)?;
        let mut accepted = false;
        for _ in 0..=opts.step_halving_max {
            if let Ok(s) = state(m, &[], &cand, &[]) {
                let dev = weighted_deviance(m, &s.mu);
                if it == 0 || dev <= dev_old * (1.0 + 1e-12) {
                    beta = cand.clone();
                    eta = s.eta;
                    mu = s.mu;
                    accepted = true;
                    let done = (dev_old - dev).abs() <= 1e-12 * (dev.abs() + 0.1);
                    dev_old = dev;
                    if done {
                        let beta = update_beta(m, &[], &[], &beta, opts)?;
                        let s = state(m, &[], &beta, &[])?;
                        return Ok((beta.clone(), estimate_lambda(m, &s.mu)));
                    }
                    break;
                }
            }
            cand = if it == 0 { cand * 0.5 } else { (&cand + &beta) * 0.5 };
        }
        if !accepted {
            break;
        }
    }
    let beta = update_beta(m, &[], &[], &beta, opts)?;
    let s = state(m, &[], &beta, &[])?;
    Ok((beta.clone(), estimate_lambda(m, &s.mu)))
}

/// Split a temporary child-level prediction into child and parent parts:
/// b̂₂ = (Z₂ᵀZ₂)⁻¹Z₂ᵀ b̄₁ and b̂₁ = b̄₁ − Z₂ b̂₂.
pub fn predict_nested(b_bar1: &DVector<f64>, parent_of: &[usize], n_parents: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    if parent_of.len() != b_bar1.len() {
        return Err(Error::domain("nesting map length differs from the child vector"));
    }
    let mut sums = vec![0.0; n_parents];
    let mut counts = vec![0usize; n_parents];
    for (j, &p) in parent_of.iter().enumerate() {
        sums[p] += b_bar1[j];
        counts[p] += 1;
    }
    if let Some(p) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("parent cluster {} has no child clusters", p + 1)));
    }
    let b2 = DVector::from_iterator(n_parents, sums.iter().zip(&counts).map(|(s, &c)| s / c as f64));
    let b1 = DVector::from_iterator(b_bar1.len(), parent_of.iter().enumerate().map(|(j, &p)| b_bar1[j] - b2[p]));
    Ok((b1, b2))
}

/// Fit one marginal by the alternating algorithm.
pub fn fit_marginal(m: &MarginalDesign, comps: &[&ClusterComponent], opts: &FitOptions) -> Result<(MarginalFit, Vec<DVector<f64>>)> {
    fit_marginal_from(m, comps, None, opts)
}

/// As [`fit_marginal`], warm-started from `start` when it is a valid state.
pub fn fit_marginal_from(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    start: Option<&WorkingState>,
    opts: &FitOptions,
) -> Result<(MarginalFit, Vec<DVector<f64>>)> {
    let warm = start.and_then(|w| {
        let s = state(m, comps, &w.beta, &w.b).ok()?;
        Some((w.beta.clone(), estimate_lambda(m, &s.mu), w.b.clone()))
    });
    let (mut beta, mut lambda, mut b) = match warm {
        Some(w) => w,
        None => {
            let (beta, lambda) = glm_fit(m, opts)?;
            (beta, lambda, comps.iter().map(|c| DVector::zeros(c.n_clusters)).collect())
        }
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut degenerate = Vec::new();
    let mut iterations = 0;
    while iterations < opts.max_outer {
        iterations += 1;
        let pred = match predict_b(m, comps, &beta, &b, opts) {
            Ok(p) => p,
            Err(Error::NonConvergence(_)) | Err(Error::Domain(_)) => break,
            Err(e) => return Err(e),
        };
        let beta_new = match update_beta(m, comps, &pred.b, &beta, opts) {
            Ok(v) => v,
            Err(Error::NonConvergence(_)) | Err(Error::Domain(_)) | Err(Error::Singular(_)) => break,
            Err(e) => return Err(e),
        };
        let s = state(m, comps, &beta_new, &pred.b)?;
        let lambda_new = estimate_lambda(m, &s.mu);
        let mut change = max_abs_diff(&beta, &beta_new).max((lambda - lambda_new).abs());
        for (old, new) in b.iter().zip(&pred.b) {
            change = change.max(max_abs_diff(old, new));
        }
        trace.push(change);
        beta = beta_new;
        lambda = lambda_new;
        b = pred.b;
        degenerate = pred.degenerate;
        if change < opts.outer_tol && pred.converged {
            converged = true;
            break;
        }
    }
    if converged {
        if let Some((pb, pbeta)) = polish(m, comps, &beta, &b, &degenerate, opts) {
            beta = pbeta;
            b = pb;
            let s = state(m, comps, &beta, &b)?;
            lambda = estimate_lambda(m, &s.mu);
        }
    }
    let fit = MarginalFit {
        name: m.name.clone(),
        beta,
        beta_names: m.x_names.clone(),
        lambda,
        converged,
        iterations,
        trace,
        degenerate,
    };
    Ok((fit, b))
}

/// Joint Newton on (ψ*_β, ψ*_b) = 0 subject to Σ_j Δb_rj = 0 per component,
/// with degenerate clusters frozen. Returns None if no improvement is made.
fn polish(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    beta: &DVector<f64>,
    b: &[DVector<f64>],
    degenerate: &[DegenerateCluster],
    opts: &FitOptions,
) -> Option<(Vec<DVector<f64>>, DVector<f64>)> {
    let k = m.k();
    let offsets = component_offsets(comps, k);
    let full = *offsets.last().unwrap();
    // Renumber free coordinates.
    let mut map: Vec<Option<usize>> = (0..full).map(Some).collect();
    for d in degenerate {
        map[offsets[d.component] + d.cluster] = None;
    }
    let mut next = 0;
    for slot in map.iter_mut() {
        if slot.is_some() {
            *slot = Some(next);
            next += 1;
        }
    }
    let p = next;
    let r_count = comps.len();
    if p + r_count > POLISH_MAX_DIM {
        return None;
    }
    let eval = |beta: &DVector<f64>, b: &[DVector<f64>], want_jac: bool| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let s = state(m, comps, beta, b).ok()?;
        let mut g = DVector::zeros(p);
        let mut j = DMatrix::zeros(if want_jac { p } else { 0 }, if want_jac { p } else { 0 });
        for i in 0..m.n() {
            let (u, h, _) = obs_terms(m.family, m.link, m.y[i], s.mu[i], m.weights[i]);
            for a in 0..k {
                g[a] += m.x[(i, a)] * u;
            }
            for (r, c) in comps.iter().enumerate() {
                if let Some(v) = map[offsets[r] + c.index[i]] {
                    g[v] += u;
                }
            }
            if want_jac {
                accumulate_obs(&mut j, &m.x, i, comps, &offsets, h, Some(&map));
            }
        }
        if want_jac {
            mirror_lower(&mut j);
        }
        Some((g, j))
    };
    let mut beta = beta.clone();
    let mut b: Vec<DVector<f64>> = b.to_vec();
    let (mut g, mut jac) = eval(&beta, &b, true)?;
    let start_norm = max_abs(&g);
    for _ in 0..opts.max_inner {
        let norm = max_abs(&g);
        if norm <= 0.1 * opts.inner_tol {
            break;
        }
        let dim = p + r_count;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (p, p)).copy_from(&jac);
        for (r, c) in comps.iter().enumerate() {
            for jj in 0..c.n_clusters {
                if let Some(v) = map[offsets[r] + jj] {
                    kkt[(p + r, v)] = 1.0;
                    kkt[(v, p + r)] = 1.0;
                }
            }
        }
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, p).copy_from(&(-&g));
        let step = linalg::solve(&kkt, &rhs).ok()?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.step_halving_max {
            let cb = &beta + t * step.rows(0, k);
            let cbv: Vec<DVector<f64>> = comps
                .iter()
                .enumerate()
                .map(|(r, c)| {
                    DVector::from_fn(c.n_clusters, |jj, _| match map[offsets[r] + jj] {
                        Some(v) => b[r][jj] + t * step[v],
                        None => b[r][jj],
                    })
                })
                .collect();
            if let Some((ng, nj)) = eval(&cb, &cbv, true) {
                if max_abs(&ng) < norm {
                    accepted = Some((cb, cbv, ng, nj));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cb, cbv, ng, nj)) = accepted else { break };
        beta = cb;
        b = cbv;
        g = ng;
        jac = nj;
    }
    if max_abs(&g) >= start_norm {
        return None;
    }
    for v in b.iter_mut() {
        *v = project_zero_mean(v);
    }
    Some((b, beta))
}

/// Validate, build the design and fit.
pub fn fit(model: &ModelSpec, data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    let design = Design::build(model, data)?;
    fit_design(&design, opts)
}

pub fn fit_design(design: &Design, opts: &FitOptions) -> Result<FitResult> {
    opts.check()?;
    let cs = &design.clusters;
    let active = cs.active();
    let comps: Vec<&ClusterComponent> = active.iter().map(|&r| &cs.components[r]).collect();
    for n in &cs.nesting {
        if cs.nesting.iter().filter(|o| o.parent == n.parent).count() > 1 {
            return Err(Error::Unsupported(format!(
                "component '{}' is the parent of several components",
                cs.components[n.parent].name
            )));
        }
    }
    let mut marginals = Vec::with_capacity(design.dim());
    let mut b_active: Vec<Vec<DVector<f64>>> = Vec::with_capacity(design.dim());
    for m in &design.marginals {
        let (mut f, b) = fit_marginal(m, &comps, opts)?;
        for d in f.degenerate.iter_mut() {
            d.component = active[d.component];
        }
        marginals.push(f);
        b_active.push(b);
    }
    let converged = marginals.iter().all(|f| f.converged);
    let iterations = marginals.iter().map(|f| f.iterations).max().unwrap_or(0);

    let covariance = if opts.estimate_covariance {
        let sigma_b: Vec<DMatrix<f64>> = design
            .marginals
            .iter()
            .zip(&marginals)
            .zip(&b_active)
            .map(|((m, f), b)| asymptotics::sigma_b_hat_marginal(m, &comps, &f.beta, b, f.lambda, Mode::Empirical))
            .collect::<Result<_>>()?;
        Some(covariance::estimate(design, &active, &b_active, &sigma_b)?)
    } else {
        None
    };

    // Distribute active predictions, then split nested chains.
    let working: Vec<WorkingState> = marginals
        .iter()
        .zip(&b_active)
        .map(|(f, b)| WorkingState { beta: f.beta.clone(), b: b.clone() })
        .collect();
    let mut b: Vec<Vec<DVector<f64>>> = cs
        .components
        .iter()
        .map(|c| vec![DVector::zeros(c.n_clusters); design.dim()])
        .collect();
    for (a, &r) in active.iter().enumerate() {
        for jm in 0..design.dim() {
            b[r][jm] = b_active[jm][a].clone();
        }
    }
    for &r in &active {
        let mut child = r;
        while let Some(nest) = cs.parent_of(child) {
            let q_parent = cs.components[nest.parent].n_clusters;
            for jm in 0..design.dim() {
                let (b1, b2) = predict_nested(&b[child][jm], &nest.map, q_parent)?;
                let shift = b2.mean();
                b[child][jm] = b1;
                b[nest.parent][jm] = b2.map(|v| v - shift);
                // The removed mean moves into the intercept; η is unchanged.
                marginals[jm].beta[0] += shift;
            }
            child = nest.parent;
        }
    }

    Ok(FitResult { method: Method::Condinf, marginals, b, covariance, converged, iterations, active, working })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClusterStructure;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_way(y: Vec<f64>, groups: Vec<usize>, q: usize, family: Family, link: Link) -> Design {
        let n = y.len();
        let m = MarginalDesign::new("y", family, link, DVector::from_vec(y), DMatrix::from_element(n, 1, 1.0));
        Design::new(vec![m], ClusterStructure::single(ClusterComponent::from_indices("g", groups, q)))
    }

    #[test]
    fn projection_examples() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(project_zero_mean(&v).as_slice(), &[-1.0, 0.0, 1.0]);
        let z = DVector::zeros(3);
        assert_eq!(project_zero_mean(&z), z);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = DVector::from_fn(9, |_, _| rng.random::<f64>());
        let p = project_zero_mean(&r);
        assert!(max_abs_diff(&project_zero_mean(&p), &p) < 1e-15);
        assert!(p.mean().abs() < 1e-15);
    }

    #[test]
    fn linear_predictor_examples() {
        let comp = ClusterComponent::from_indices("g", vec![0, 0, 1], 2);
        let s = linear_predictor(
            &DVector::from_vec(vec![1.0]),
            &[DVector::zeros(2)],
            &DMatrix::from_element(3, 1, 1.0),
            &[&comp],
            Link::Identity,
        )
        .unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0, 1.0]);
        let comp = ClusterComponent::from_indices("g", vec![0, 1], 2);
        let s = linear_predictor(
            &DVector::from_vec(vec![0.0]),
            &[DVector::from_vec(vec![1.0, -1.0])],
            &DMatrix::from_element(2, 1, 1.0),
            &[&comp],
            Link::Log,
        )
        .unwrap();
        assert_eq!(s.mu[0], 1f64.exp());
        assert_eq!(s.mu[1], (-1f64).exp());
    }

    #[test]
    fn gaussian_prediction_is_centred_cluster_means() {
        let y = vec![1.0, 3.0, 4.0, 6.0, 10.0, 11.0];
        let d = one_way(y, vec![0, 0, 1, 1, 2, 2], 3, Family::Normal, Link::Identity);
        let m = &d.marginals[0];
        let comp = &d.clusters.components[0];
        let pred = predict_b(m, &[comp], &DVector::zeros(1), &[DVector::zeros(3)], &FitOptions::default()).unwrap();
        // Oracle: cluster means (2, 5, 10.5) minus their mean.
        let means = [2.0, 5.0, 10.5];
        let grand = (2.0 + 5.0 + 10.5) / 3.0;
        for j in 0..3 {
            assert!((pred.b[0][j] - (means[j] - grand)).abs() < 1e-10);
        }
    }

    #[test]
    fn poisson_prediction_is_centred_log_means() {
        let y = vec![1.0, 3.0, 0.0, 2.0, 5.0, 9.0];
        let d = one_way(y, vec![0, 0, 1, 1, 2, 2], 3, Family::Poisson, Link::Log);
        let comp = &d.clusters.components[0];
        let pred = predict_b(&d.marginals[0], &[comp], &DVector::zeros(1), &[DVector::zeros(3)], &FitOptions::default()).unwrap();
        let logs = [2f64.ln(), 1f64.ln(), 7f64.ln()];
        let mean = logs.iter().sum::<f64>() / 3.0;
        for j in 0..3 {
            assert!((pred.b[0][j] - (logs[j] - mean)).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_clusters_give_zero() {
        let d = one_way(vec![1.0, 2.0, 1.0, 2.0], vec![0, 0, 1, 1], 2, Family::Poisson, Link::Log);
        let r = fit_design(&d, &FitOptions::default()).unwrap();
        assert!(max_abs(&r.b[0][0]) < 1e-12);
    }

    #[test]
    fn ols_and_rss_over_n_with_zero_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 30;
        let x = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * x[(i, 1)] + rng.random::<f64>());
        let m = MarginalDesign::new("y", Family::Normal, Link::Identity, y.clone(), x.clone());
        let comp = ClusterComponent::from_indices("g", vec![0; n], 1);
        let beta = update_beta(&m, &[&comp], &[DVector::zeros(1)], &DVector::zeros(2), &FitOptions::default()).unwrap();
        // Oracle: normal equations.
        let xtx = x.transpose() * &x;
        let ols = xtx.lu().solve(&(x.transpose() * &y)).unwrap();
        assert!(max_abs_diff(&beta, &ols) < 1e-10);
        let resid = &y - &x * &ols;
        let lambda = estimate_lambda(&m, &(&x * &beta));
        assert!((lambda - resid.norm_squared() / n as f64).abs() < 1e-12);
    }

    #[test]
    fn poisson_dispersion_is_one() {
        let d = one_way(vec![1.0, 2.0, 4.0, 0.0], vec![0, 0, 1, 1], 2, Family::Poisson, Link::Log);
        let r = fit_design(&d, &FitOptions::default()).unwrap();
        assert_eq!(r.marginals[0].lambda, 1.0);
    }

    #[test]
    fn gamma_dispersion_solves_its_score() {
        let y = vec![0.5, 1.2, 2.5, 0.8, 1.9, 3.1];
        let d = one_way(y, vec![0, 0, 0, 1, 1, 1], 2, Family::Gamma, Link::Log);
        let m = &d.marginals[0];
        let mu = DVector::from_element(6, 1.5);
        let lambda = estimate_lambda(m, &mu);
        // Oracle: the log-likelihood in λ is maximal there.
        let ll = |l: f64| conditional_loglik(m, &mu, l);
        let h = 1e-5 * lambda;
        assert!(ll(lambda) >= ll(lambda + h) && ll(lambda) >= ll(lambda - h));
    }

    #[test]
    fn nested_split_examples() {
        let (b1, b2) = predict_nested(&DVector::from_vec(vec![1.0, 3.0, 2.0, 4.0]), &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(b2.as_slice(), &[2.0, 3.0]);
        assert_eq!(b1.as_slice(), &[-1.0, 1.0, -1.0, 1.0]);
        let v = DVector::from_vec(vec![0.3, -0.1, 0.7]);
        let (b1, b2) = predict_nested(&v, &[0, 0, 0], 1).unwrap();
        assert!((b2[0] - v.mean()).abs() < 1e-15);
        assert!(max_abs_diff(&b1, &(&v - DVector::from_element(3, v.mean()))) < 1e-15);
        let (b1, _) = predict_nested(&DVector::from_vec(vec![2.0, 2.0, -5.0]), &[0, 0, 1], 2).unwrap();
        assert!(b1.iter().all(|&v| v == 0.0));
        assert!(predict_nested(&v, &[0, 0, 0], 2).is_err());
    }

    #[test]
    fn all_zero_poisson_cluster_is_clamped_and_flagged() {
        let y = vec![0.0, 0.0, 0.0, 3.0, 4.0, 2.0, 5.0, 1.0, 2.0];
        let d = one_way(y, vec![0, 0, 0, 1, 1, 1, 2, 2, 2], 3, Family::Poisson, Link::Log);
        let r = fit_design(&d, &FitOptions::default()).unwrap();
        assert_eq!(r.marginals[0].degenerate, vec![DegenerateCluster { component: 0, cluster: 0 }]);
        assert!(r.b[0][0].iter().all(|v| v.is_finite()));
        assert!(r.b[0][0].mean().abs() < 1e-12);
    }

    #[test]
    fn inner_solve_is_monotone() {
        let y = vec![0.0, 1.0, 7.0, 9.0];
        let d = one_way(y, vec![0, 0, 0, 0], 1, Family::Poisson, Link::Log);
        let m = &d.marginals[0];
        let members: Vec<usize> = (0..4).collect();
        let eta0 = DVector::from_element(4, -3.0);
        let mut lls = Vec::new();
        let mut b = 5.0;
        for _ in 0..12 {
            let one = FitOptions { max_inner: 1, ..FitOptions::default() };
            let s = solve_cluster(m, &members, &eta0, b, &one).unwrap();
            b = s.b;
            let (dev, ..) = cluster_terms(m, &members, &eta0, b).unwrap();
            lls.push(-dev);
        }
        for w in lls.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs());
        }
    }
}
