//! Laplace-approximation baseline (penalised quasi-likelihood).
//!
//! Linearising every marginal around the current fit gives a working
//! response `z` with GLM weights `W`; the stacked working responses form a
//! linear mixed model with random-effects covariance `D = Σ ⊗ I_q`. At fixed
//! Σ, (β, b) maximise the penalised likelihood by damped mixed-model-equation
//! steps; Σ and the free dispersions then maximise the working model's
//! profile likelihood. The two steps alternate. With a single
//! 0/1 allocation the b-block decouples into q blocks of size d, so all work
//! goes through per-cluster sufficient statistics.

use nalgebra::{DMatrix, DVector};

use crate::covariance::CovarianceEstimate;
use crate::error::{Error, Result};
use crate::estimator::{self, FitOptions, FitResult, MarginalFit, Method, WorkingState};
use crate::linalg::{self, chol_from_params, params_from_cov};
use crate::model::{Design, MarginalDesign, RandomDist};
use crate::optim::{bfgs, BfgsOptions};
use crate::{Dataset, ModelSpec};

pub const WEIGHT_CLAMP: f64 = 1e10;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LaplaceOptions {
    /// Hold Σ fixed instead of estimating it.
    pub fixed_sigma: Option<DMatrix<f64>>,
    pub sigma_start: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub result: FitResult,
    /// Per marginal, the β block of the inverse mixed-model information.
    pub beta_cov: Vec<DMatrix<f64>>,
}

/// Diagonal GLM weights `w_i / (λ V(µ_i) g′(µ_i)²)`; the flag reports
/// whether any entry was clamped.
pub fn glm_weights(m: &MarginalDesign, mu: &DVector<f64>, lambda: f64) -> (DVector<f64>, bool) {
    let mut clamped = false;
    let w = DVector::from_fn(m.n(), |i, _| {
        let g1 = m.link.derivative(mu[i]);
        let v = m.weights[i] / (lambda * m.family.variance_raw(mu[i]) * g1 * g1);
        if v.is_finite() && v <= WEIGHT_CLAMP {
            v
        } else {
            clamped = true;
            WEIGHT_CLAMP
        }
    });
    (w, clamped)
}

/// Sufficient statistics of one marginal's working model (λ-free weights),
/// in terms of the working residual `e = z − η` at the linearisation point.
/// Keeping `e` rather than `z` avoids cancellation when weights are large.
struct WorkingStats {
    n: f64,
    /// XᵀW₀X, XᵀW₀e, eᵀW₀e.
    a: DMatrix<f64>,
    c: DVector<f64>,
    zz: f64,
    /// Per cluster: Σw₀, Σw₀e, Σw₀x.
    s: Vec<f64>,
    r: Vec<f64>,
    u: Vec<DVector<f64>>,
}

fn working_stats(m: &MarginalDesign, cluster: &[usize], q: usize, mu: &DVector<f64>) -> (WorkingStats, bool) {
    let k = m.k();
    let (w, clamped) = glm_weights(m, mu, 1.0);
    let mut st = WorkingStats {
        n: m.n() as f64,
        a: DMatrix::zeros(k, k),
        c: DVector::zeros(k),
        zz: 0.0,
        s: vec![0.0; q],
        r: vec![0.0; q],
        u: vec![DVector::zeros(k); q],
    };
    for i in 0..m.n() {
        let z = (m.y[i] - mu[i]) * m.link.derivative(mu[i]);
        let wi = w[i];
        let l = cluster[i];
        st.zz += wi * z * z;
        st.s[l] += wi;
        st.r[l] += wi * z;
        for p in 0..k {
            let xp = m.x[(i, p)] * wi;
            st.c[p] += xp * z;
            st.u[l][p] += xp;
            for t in 0..=p {
                st.a[(p, t)] += xp * m.x[(i, t)];
            }
        }
    }
    estimator::mirror_lower(&mut st.a);
    (st, clamped)
}

/// The working mixed model for fixed statistics, linearised at (β₀, b₀).
struct Working<'a> {
    stats: &'a [WorkingStats],
    beta0: &'a [DVector<f64>],
    /// q × d.
    b0: &'a DMatrix<f64>,
    offsets: Vec<usize>,
    q: usize,
}

struct Solved {
    beta: Vec<DVector<f64>>,
    /// q × d.
    b: DMatrix<f64>,
    /// Inverse of the β Schur complement.
    beta_cov: DMatrix<f64>,
    /// Objective (half of −2 log-likelihood, up to a constant) and gradient
    /// with respect to Σ and μ = 1/λ.
    value: f64,
    grad_sigma: DMatrix<f64>,
    grad_mu: Vec<f64>,
}

impl Working<'_> {
    fn new<'a>(stats: &'a [WorkingStats], beta0: &'a [DVector<f64>], b0: &'a DMatrix<f64>) -> Working<'a> {
        let mut offsets = vec![0];
        for s in stats {
            offsets.push(offsets.last().unwrap() + s.a.nrows());
        }
        Working { stats, beta0, b0, offsets, q: stats[0].s.len() }
    }

    fn solve(&self, sigma: &DMatrix<f64>, lambda: &[f64]) -> Result<Solved> {
        let d = self.stats.len();
        let kt = *self.offsets.last().unwrap();
        let chol = sigma
            .clone()
            .cholesky()
            .or_else(|| (sigma + DMatrix::identity(d, d) * 1e-10).cholesky())
            .ok_or_else(|| Error::Singular("random-component covariance is not positive definite".into()))?;
        let p = chol.inverse();
        let logdet_sigma = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mu: Vec<f64> = lambda.iter().map(|l| 1.0 / l).collect();

        // Per-cluster H_l⁻¹ and the β Schur complement.
        let mut m = DMatrix::zeros(kt, kt);
        let mut rhs = DVector::zeros(kt);
        for (a, st) in self.stats.iter().enumerate() {
            let o = self.offsets[a];
            let k = st.a.nrows();
            m.view_mut((o, o), (k, k)).copy_from(&(&st.a * mu[a]));
            rhs.rows_mut(o, k).copy_from(&(&st.c * mu[a]));
        }
        let mut h_inv = Vec::with_capacity(self.q);
        let mut logdet_h = 0.0;
        for l in 0..self.q {
            let mut h = p.clone();
            for a in 0..d {
                h[(a, a)] += self.stats[a].s[l] * mu[a];
            }
            let hc = h.cholesky().ok_or_else(|| Error::Singular("mixed-model block is not positive definite".into()))?;
            logdet_h += 2.0 * hc.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let hi = hc.inverse();
            // U_l is K × d with marginal a's column µ_a u_la in its own rows.
            let pb = &p * self.b0.row(l).transpose();
            let rl = DVector::from_fn(d, |a, _| self.stats[a].r[l] * mu[a] - pb[a]);
            let hr = &hi * &rl;
            for a in 0..d {
                let oa = self.offsets[a];
                let ua = &self.stats[a].u[l] * mu[a];
                for (pi, uv) in ua.iter().enumerate() {
                    rhs[oa + pi] -= uv * hr[a];
                }
                for c in 0..d {
                    let oc = self.offsets[c];
                    let uc = &self.stats[c].u[l] * mu[c];
                    let coef = hi[(a, c)];
                    for (pi, uv) in ua.iter().enumerate() {
                        for (ti, wv) in uc.iter().enumerate() {
                            m[(oa + pi, oc + ti)] -= uv * wv * coef;
                        }
                    }
                }
            }
            h_inv.push(hi);
        }
        linalg::symmetrize(&mut m);
        let beta_cov = linalg::inverse(&m)?;
        let beta_all = &beta_cov * &rhs;
        // Increments from β₀.
        let beta: Vec<DVector<f64>> =
            (0..d).map(|a| beta_all.rows(self.offsets[a], self.stats[a].a.nrows()).into_owned()).collect();

        let mut b = DMatrix::zeros(self.q, d);
        let mut value = 0.0;
        let mut g_p = -(sigma * self.q as f64);
        let mut grad_mu = vec![0.0; d];
        let mut resid = vec![0.0; d];
        for (a, st) in self.stats.iter().enumerate() {
            resid[a] = st.zz - 2.0 * beta[a].dot(&st.c) + beta[a].dot(&(&st.a * &beta[a]));
            value += st.n * lambda[a].ln() + resid[a] * mu[a];
            grad_mu[a] += resid[a];
        }
        value += self.q as f64 * logdet_sigma + logdet_h;
        for (l, hi) in h_inv.iter().enumerate() {
            let b0 = self.b0.row(l).transpose();
            let pb = &p * &b0;
            let e = DVector::from_fn(d, |a, _| self.stats[a].r[l] - self.stats[a].u[l].dot(&beta[a]));
            let g = DVector::from_fn(d, |a, _| e[a] * mu[a] - pb[a]);
            let hg = hi * &g;
            let bl = &b0 + &hg;
            b.set_row(l, &bl.transpose());
            value += b0.dot(&pb) - g.dot(&hg);
            g_p += hi + &bl * bl.transpose();
            for a in 0..d {
                let s = self.stats[a].s[l];
                grad_mu[a] += hi[(a, a)] * s - 2.0 * hg[a] * e[a] + hg[a] * hg[a] * s;
            }
        }
        let beta = beta.iter().zip(self.beta0).map(|(db, b0)| b0 + db).collect();
        // dF/dΣ = −P (dF/dP) P.
        let mut grad_sigma = -(&p * g_p * &p) * 0.5;
        linalg::symmetrize(&mut grad_sigma);
        let grad_mu = grad_mu.into_iter().map(|g| 0.5 * g).collect();
        Ok(Solved { beta, b, beta_cov, value: 0.5 * value, grad_sigma, grad_mu })
    }
}

fn penalty_inverse(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = sigma.nrows();
    sigma
        .clone()
        .cholesky()
        .or_else(|| (sigma + DMatrix::identity(d, d) * 1e-10).cholesky())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular("random-component covariance is not positive definite".into()))
}

/// Σ log f(y | β, b) − ½ Σ_l b_lᵀ Σ⁻¹ b_l, dropping terms free of (β, b).
fn penalised_loglik(design: &Design, beta: &[DVector<f64>], b: &DMatrix<f64>, p_inv: &DMatrix<f64>, lambda: &[f64]) -> f64 {
    let comp = &design.clusters.components[0];
    let mut total = 0.0;
    for (a, m) in design.marginals.iter().enumerate() {
        let bcol = DVector::from_iterator(b.nrows(), b.column(a).iter().copied());
        let Ok(st) = estimator::linear_predictor(&beta[a], std::slice::from_ref(&bcol), &m.x, &[comp], m.link) else {
            return f64::NEG_INFINITY;
        };
        for i in 0..m.n() {
            if !m.family.in_mean_space(st.mu[i]) {
                return f64::NEG_INFINITY;
            }
            total -= m.weights[i] * m.family.deviance_raw(m.y[i], st.mu[i]) / (2.0 * lambda[a]);
        }
    }
    for l in 0..b.nrows() {
        let r = b.row(l).transpose();
        total -= 0.5 * r.dot(&(p_inv * &r));
    }
    total
}

pub fn fit_laplace(model: &ModelSpec, data: &Dataset, opts: &FitOptions, lopts: &LaplaceOptions) -> Result<LaplaceFit> {
    let design = Design::build(model, data)?;
    fit_laplace_design(&design, opts, lopts)
}

pub fn fit_laplace_design(design: &Design, opts: &FitOptions, lopts: &LaplaceOptions) -> Result<LaplaceFit> {
    opts.check()?;
    if design.random_dist != RandomDist::Gaussian {
        return Err(Error::Unsupported("the Laplace method assumes Gaussian random components".into()));
    }
    if design.clusters.components.len() != 1 {
        return Err(Error::Unsupported("the Laplace method supports a single cluster component".into()));
    }
    let d = design.dim();
    let comp = &design.clusters.components[0];
    let q = comp.n_clusters;
    let free: Vec<usize> = (0..d).filter(|&a| design.marginals[a].lambda_fixed().is_none()).collect();
    let n_sigma = d * (d + 1) / 2;
    if let Some(s) = &lopts.fixed_sigma {
        if s.shape() != (d, d) {
            return Err(Error::config("fixed Σ has the wrong dimension"));
        }
    }

    let mut beta = Vec::with_capacity(d);
    let mut lambda = Vec::with_capacity(d);
    for m in &design.marginals {
        let (b0, l0) = estimator::glm_fit(m, opts)?;
        beta.push(b0);
        lambda.push(m.lambda_fixed().unwrap_or(l0));
    }
    let mut b = DMatrix::<f64>::zeros(q, d);
    let mut sigma = lopts
        .fixed_sigma
        .clone()
        .or_else(|| lopts.sigma_start.clone())
        .unwrap_or_else(|| DMatrix::identity(d, d) * 0.1);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut grad_norm = 0.0;
    let stats_at = |beta: &[DVector<f64>], b: &DMatrix<f64>| -> Result<(Vec<WorkingStats>, bool)> {
        let mut stats = Vec::with_capacity(d);
        let mut clamped = false;
        for (a, m) in design.marginals.iter().enumerate() {
            let bcol = DVector::from_iterator(q, b.column(a).iter().copied());
            let st = estimator::linear_predictor(&beta[a], std::slice::from_ref(&bcol), &m.x, &[comp], m.link)?;
            let (ws, cl) = working_stats(m, &comp.index, q, &st.mu);
            clamped |= cl;
            stats.push(ws);
        }
        Ok((stats, clamped))
    };
    let mut clamped = false;

    for _ in 0..opts.max_outer {
        let (beta_old, b_old, sigma_old, lambda_old) = (beta.clone(), b.clone(), sigma.clone(), lambda.clone());

        // (β, b) at fixed Σ, λ: damped Newton on the penalised likelihood.
        let p_inv = penalty_inverse(&sigma)?;
        let mut pl = penalised_loglik(design, &beta, &b, &p_inv, &lambda);
        for _ in 0..opts.max_inner {
            let (stats, _) = stats_at(&beta, &b)?;
            let sol = Working::new(&stats, &beta, &b).solve(&sigma, &lambda)?;
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.step_halving_max {
                let cb: Vec<DVector<f64>> = beta.iter().zip(&sol.beta).map(|(o, n)| o + (n - o) * t).collect();
                let cbb = &b + (&sol.b - &b) * t;
                let v = penalised_loglik(design, &cb, &cbb, &p_inv, &lambda);
                if v >= pl - 1e-12 * pl.abs() {
                    accepted = Some((cb, cbb, v));
                    break;
                }
                t *= 0.5;
            }
            let Some((cb, cbb, v)) = accepted else { break };
            let mut change: f64 = (&cbb - &b).amax();
            for a in 0..d {
                change = change.max((&cb[a] - &beta[a]).amax());
            }
            beta = cb;
            b = cbb;
            pl = v;
            if change < 0.1 * opts.outer_tol {
                break;
            }
        }

        // Σ and the free dispersions from the profile likelihood of the
        // working model at the current linearisation.
        let (stats, cl) = stats_at(&beta, &b)?;
        clamped = cl;
        let working = Working::new(&stats, &beta, &b);
        let mut theta: Vec<f64> = Vec::new();
        if lopts.fixed_sigma.is_none() {
            theta.extend(params_from_cov(&sigma));
        }
        theta.extend(free.iter().map(|&a| lambda[a].ln()));
        let n_s = if lopts.fixed_sigma.is_none() { n_sigma } else { 0 };
        let unpack = |t: &[f64], sigma: &DMatrix<f64>, lambda: &[f64]| -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
            let (s, l) = if n_s > 0 {
                let l = chol_from_params(&t[..n_s], d);
                (&l * l.transpose(), l)
            } else {
                (sigma.clone(), DMatrix::zeros(d, d))
            };
            let mut lam = lambda.to_vec();
            for (i, &a) in free.iter().enumerate() {
                lam[a] = t[n_s + i].exp();
            }
            (s, lam, l)
        };
        if !theta.is_empty() {
            let fg = |t: &[f64]| -> (f64, Vec<f64>) {
                let (s, lam, l) = unpack(t, &sigma, &lambda);
                match working.solve(&s, &lam) {
                    Ok(sol) => {
                        let mut g = Vec::with_capacity(t.len());
                        if n_s > 0 {
                            let gl = &sol.grad_sigma * 2.0 * &l;
                            for i in 0..d {
                                for j in 0..=i {
                                    g.push(if i == j { gl[(i, j)] * l[(i, i)] } else { gl[(i, j)] });
                                }
                            }
                        }
                        for &a in &free {
                            // d/d log λ with μ = 1/λ.
                            g.push(0.5 * stats[a].n - sol.grad_mu[a] / lam[a]);
                        }
                        (sol.value, g)
                    }
                    Err(_) => (f64::INFINITY, vec![0.0; t.len()]),
                }
            };
            let min = bfgs(fg, &theta, BfgsOptions { grad_tol: 1e-9, max_iter: 500, f_tol: 1e-16, ..Default::default() });
            grad_norm = min.grad_norm;
            let (s, lam, _) = unpack(&min.x, &sigma, &lambda);
            sigma = s;
            lambda = lam;
        }

        let mut change: f64 = (&b - &b_old).amax().max((&sigma - &sigma_old).amax());
        for a in 0..d {
            change = change.max((&beta[a] - &beta_old[a]).amax()).max((lambda[a] - lambda_old[a]).abs());
        }
        trace.push(change);
        if change < opts.outer_tol {
            converged = true;
            break;
        }
    }

    // Final covariance of β at the converged working model.
    let (stats, _) = stats_at(&beta, &b)?;
    let wk = Working::new(&stats, &beta, &b);
    let sol = wk.solve(&sigma, &lambda)?;
    let offsets = wk.offsets.clone();
    let beta_cov: Vec<DMatrix<f64>> =
        (0..d).map(|a| sol.beta_cov.view((offsets[a], offsets[a]), (design.marginals[a].k(), design.marginals[a].k())).into_owned()).collect();

    // Any residual mean of b moves into the intercept.
    let mut marginals = Vec::with_capacity(d);
    let mut b_out = Vec::with_capacity(d);
    let mut working = Vec::with_capacity(d);
    for (a, m) in design.marginals.iter().enumerate() {
        let col = DVector::from_iterator(q, b.column(a).iter().copied());
        let shift = col.mean();
        let mut bt = beta[a].clone();
        bt[0] += shift;
        let bp = col.map(|v| v - shift);
        marginals.push(MarginalFit {
            name: m.name.clone(),
            beta: bt.clone(),
            beta_names: m.x_names.clone(),
            lambda: lambda[a],
            converged,
            iterations: trace.len(),
            trace: trace.clone(),
            degenerate: Vec::new(),
        });
        working.push(WorkingState { beta: bt, b: vec![bp.clone()] });
        b_out.push(bp);
    }
    if clamped {
        // Clamped weights mean a fitted mean sits on the boundary.
        converged = false;
    }
    let boundary = linalg::min_eigenvalue(&sigma) < crate::covariance::SIGMA2_FLOOR;
    let covariance = CovarianceEstimate {
        matrices: vec![sigma],
        boundary,
        converged,
        grad_norm,
        repaired: false,
        objective: -sol.value,
    };
    let iterations = trace.len();
    Ok(LaplaceFit {
        result: FitResult {
            method: Method::Laplace,
            marginals,
            b: vec![b_out],
            covariance: Some(covariance),
            converged,
            iterations,
            active: vec![0],
            working,
        },
        beta_cov,
    })
}
