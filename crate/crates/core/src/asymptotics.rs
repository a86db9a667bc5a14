//! Sensitivity and variability of the inference functions, the Godambe
//! block inverse, unconditional asymptotic variances and regularity checks.
//!
//! `S` and `V` are accumulated as sums over observations, so `S⁻¹ V S⁻ᵀ` is
//! directly the finite-sample covariance of the estimates.
//!
//! Because an intercept shift can be absorbed by the random components, the
//! inference functions are singular in (β, b). All sandwich computations run
//! in (β, c) with `b_r = C_r c_r`, where `C_r` is an orthonormal basis of the
//! mean-zero subspace; results for `b` are mapped back through `C_r`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{
    self, accumulate_obs, component_offsets, fit_marginal_from, inference_functions, mirror_lower, obs_terms,
    FitOptions, FitResult, WorkingState,
};
use crate::linalg::{self, block_diag, zero_mean_basis};
use crate::model::{ClusterComponent, Design, MarginalDesign};
use crate::sim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Observed Jacobian and outer products of per-observation scores.
    #[default]
    Empirical,
    /// Expected curvature; V = 2λS.
    ModelBased,
}

/// Partitioned sandwich with `k` fixed-effect coordinates first.
#[derive(Debug, Clone)]
pub struct GodambeBlocks {
    pub s_beta_beta: DMatrix<f64>,
    /// ∂ψ_β/∂b (k × q)
    pub s_beta_b: DMatrix<f64>,
    /// ∂ψ_b/∂β (q × k)
    pub s_b_beta: DMatrix<f64>,
    pub s_b_b: DMatrix<f64>,
    pub v_beta_beta: DMatrix<f64>,
    pub v_beta_b: DMatrix<f64>,
    pub v_b_beta: DMatrix<f64>,
    pub v_b_b: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub j_inv_beta: DMatrix<f64>,
    pub j_inv_b: DMatrix<f64>,
    /// q × k
    pub j_inv_cross: DMatrix<f64>,
}

fn cond(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn checked_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.is_empty() {
        return Ok(m.clone());
    }
    let c = cond(m);
    if !c.is_finite() || c > 1e15 {
        return Err(Error::Singular(format!("{what} (condition number {c:.3e})")));
    }
    linalg::inverse(m).map_err(|_| Error::Singular(format!("{what} (condition number {c:.3e})")))
}

impl GodambeBlocks {
    /// Block inverse of `S` and the sandwich `S⁻¹ V S⁻ᵀ` in partitioned form.
    pub fn assemble(s: &DMatrix<f64>, v: &DMatrix<f64>, k: usize) -> Result<Self> {
        let p = s.nrows();
        let q = p - k;
        let s_beta_beta = s.view((0, 0), (k, k)).into_owned();
        let s_beta_b = s.view((0, k), (k, q)).into_owned();
        let s_b_beta = s.view((k, 0), (q, k)).into_owned();
        let s_b_b = s.view((k, k), (q, q)).into_owned();
        let v_beta_beta = v.view((0, 0), (k, k)).into_owned();
        let v_beta_b = v.view((0, k), (k, q)).into_owned();
        let v_b_beta = v.view((k, 0), (q, k)).into_owned();
        let v_b_b = v.view((k, k), (q, q)).into_owned();

        let sbb_inv = checked_inverse(&s_beta_beta, "S_ββ")?;
        let w = &s_b_b - &s_b_beta * &sbb_inv * &s_beta_b;
        let d = checked_inverse(&w, "W")?;
        let a = &sbb_inv + &sbb_inv * &s_beta_b * &d * &s_b_beta * &sbb_inv;
        let e = -(&sbb_inv * &s_beta_b * &d);
        let c = -(&d * &s_b_beta * &sbb_inv);

        let (at, et, ct, dt) = (a.transpose(), e.transpose(), c.transpose(), d.transpose());
        let j_inv_beta = &a * &v_beta_beta * &at + &e * &v_b_beta * &at + &a * &v_beta_b * &et + &e * &v_b_b * &et;
        let j_inv_b = &c * &v_beta_beta * &ct + &d * &v_b_beta * &ct + &c * &v_beta_b * &dt + &d * &v_b_b * &dt;
        let j_inv_cross = &c * &v_beta_beta * &at + &d * &v_b_beta * &at + &c * &v_beta_b * &et + &d * &v_b_b * &et;
        Ok(Self {
            s_beta_beta,
            s_beta_b,
            s_b_beta,
            s_b_b,
            v_beta_beta,
            v_beta_b,
            v_b_beta,
            v_b_b,
            a,
            c,
            d,
            e,
            w,
            j_inv_beta,
            j_inv_b,
            j_inv_cross,
        })
    }

    pub fn k(&self) -> usize {
        self.s_beta_beta.nrows()
    }

    /// Full `J⁻¹` reassembled from its blocks.
    pub fn j_inv(&self) -> DMatrix<f64> {
        let k = self.k();
        let q = self.s_b_b.nrows();
        let mut j = DMatrix::zeros(k + q, k + q);
        j.view_mut((0, 0), (k, k)).copy_from(&self.j_inv_beta);
        j.view_mut((k, k), (q, q)).copy_from(&self.j_inv_b);
        j.view_mut((k, 0), (q, k)).copy_from(&self.j_inv_cross);
        j.view_mut((0, k), (k, q)).copy_from(&self.j_inv_cross.transpose());
        j
    }
}

/// Sandwich for one marginal in contrast coordinates.
#[derive(Debug, Clone)]
pub struct MarginalGodambe {
    pub blocks: GodambeBlocks,
    /// Maps contrast coordinates to stacked cluster coordinates.
    pub basis: DMatrix<f64>,
}

impl MarginalGodambe {
    /// Covariance of the stacked projected b̂.
    pub fn sigma_b(&self) -> DMatrix<f64> {
        let mut s = &self.basis * &self.blocks.j_inv_b * self.basis.transpose();
        linalg::symmetrize(&mut s);
        s
    }
}

/// `S` and `V` in (β, b) coordinates, b stacked by component.
pub fn sensitivity_variability(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    beta: &DVector<f64>,
    b: &[DVector<f64>],
    lambda: f64,
    mode: Mode,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let st = estimator::linear_predictor(beta, b, &m.x, comps, m.link)?;
    let offsets = component_offsets(comps, m.k());
    let p = *offsets.last().unwrap();
    let mut s = DMatrix::zeros(p, p);
    let mut v = DMatrix::zeros(p, p);
    for i in 0..m.n() {
        let (u, h, f) = obs_terms(m.family, m.link, m.y[i], st.mu[i], m.weights[i]);
        match mode {
            Mode::Empirical => {
                accumulate_obs(&mut s, &m.x, i, comps, &offsets, h, None);
                accumulate_obs(&mut v, &m.x, i, comps, &offsets, u * u, None);
            }
            Mode::ModelBased => accumulate_obs(&mut s, &m.x, i, comps, &offsets, f, None),
        }
    }
    mirror_lower(&mut s);
    if mode == Mode::ModelBased {
        let lambda = m.lambda_fixed().unwrap_or(lambda);
        v = &s * (2.0 * lambda);
    } else {
        mirror_lower(&mut v);
    }
    Ok((s, v))
}

/// Block-diagonal map from contrast to cluster coordinates, one block per component.
pub fn contrast_basis(comps: &[&ClusterComponent]) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = comps.iter().map(|c| zero_mean_basis(c.n_clusters)).collect();
    block_diag(&blocks)
}

pub fn godambe_marginal(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    beta: &DVector<f64>,
    b: &[DVector<f64>],
    lambda: f64,
    mode: Mode,
) -> Result<MarginalGodambe> {
    let (s, v) = sensitivity_variability(m, comps, beta, b, lambda, mode)?;
    let k = m.k();
    let basis = contrast_basis(comps);
    let t = block_diag(&[DMatrix::identity(k, k), basis.clone()]);
    let sc = t.transpose() * &s * &t;
    let vc = t.transpose() * &v * &t;
    let blocks = GodambeBlocks::assemble(&sc, &vc, k)?;
    Ok(MarginalGodambe { blocks, basis })
}

/// Covariance of the stacked b̂ for one marginal. Falls back to a diagonal
/// approximation when the sandwich is singular.
pub fn sigma_b_hat_marginal(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    beta: &DVector<f64>,
    b: &[DVector<f64>],
    lambda: f64,
    mode: Mode,
) -> Result<DMatrix<f64>> {
    match godambe_marginal(m, comps, beta, b, lambda, mode) {
        Ok(g) => Ok(g.sigma_b()),
        Err(Error::Singular(_)) => {
            let (s, v) = sensitivity_variability(m, comps, beta, b, lambda, mode)?;
            let k = m.k();
            let q = s.nrows() - k;
            Ok(DMatrix::from_fn(q, q, |i, j| {
                if i == j {
                    let sii = s[(k + i, k + i)];
                    if sii > 0.0 {
                        v[(k + i, k + i)] / (sii * sii)
                    } else {
                        0.0
                    }
                } else {
                    0.0
                }
            }))
        }
        Err(e) => Err(e),
    }
}

/// Sandwich per marginal at a fitted model.
pub fn godambe_blocks(fit: &FitResult, design: &Design, mode: Mode) -> Result<Vec<MarginalGodambe>> {
    let comps: Vec<&ClusterComponent> = fit.active.iter().map(|&r| &design.clusters.components[r]).collect();
    design
        .marginals
        .iter()
        .zip(&fit.working)
        .zip(&fit.marginals)
        .map(|((m, w), f)| godambe_marginal(m, &comps, &w.beta, &w.b, f.lambda, mode))
        .collect()
}

/// Standard errors of β̂ per marginal from the empirical sandwich.
pub fn beta_standard_errors(fit: &FitResult, design: &Design) -> Result<Vec<DVector<f64>>> {
    Ok(godambe_blocks(fit, design, Mode::Empirical)?
        .into_iter()
        .map(|g| g.blocks.j_inv_beta.diagonal().map(|v| v.max(0.0).sqrt()))
        .collect())
}

#[derive(Debug, Clone)]
pub struct MarginalAv {
    pub mean_j_inv_beta: DMatrix<f64>,
    /// Spread of β̄(B), the root at the noise-free response µ(β̂, B).
    pub var_beta_bar: DMatrix<f64>,
    /// Spread of the full refits β̂(B); includes conditional noise.
    pub var_beta_refit: DMatrix<f64>,
    pub av_beta: DMatrix<f64>,
    pub mean_j_inv_b: DMatrix<f64>,
    pub av_b: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct UnconditionalAv {
    pub marginals: Vec<MarginalAv>,
    pub n_used: usize,
    pub n_failed: usize,
}

struct Draw {
    j_beta: Vec<DMatrix<f64>>,
    j_b: Vec<DMatrix<f64>>,
    beta_bar: Vec<DVector<f64>>,
    beta_refit: Vec<DVector<f64>>,
}

fn sample_cov(xs: &[DVector<f64>]) -> DMatrix<f64> {
    let k = xs[0].len();
    let n = xs.len();
    if n < 2 {
        return DMatrix::zeros(k, k);
    }
    let mean = xs.iter().fold(DVector::zeros(k), |a, x| a + x) / n as f64;
    let mut c = DMatrix::zeros(k, k);
    for x in xs {
        let d = x - &mean;
        c += &d * d.transpose();
    }
    c / (n - 1) as f64
}

/// Monte Carlo unconditional variances: the mean conditional sandwich plus
/// the between-draw spread of the estimate.
pub fn unconditional_av(
    design: &Design,
    fit: &FitResult,
    n_mc: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<UnconditionalAv> {
    if fit.active.len() != 1 || !design.clusters.nesting.is_empty() {
        return Err(Error::Unsupported("unconditional variances need a single cluster component".into()));
    }
    let cov = fit
        .covariance
        .as_ref()
        .ok_or_else(|| Error::config("fit carries no random-component covariance"))?;
    let sigma = cov.matrices[0].clone();
    let comp = &design.clusters.components[fit.active[0]];
    let comps = [comp];
    let q = comp.n_clusters;
    let d = design.dim();
    let inner = FitOptions { estimate_covariance: false, ..*opts };

    let one = |rep: usize| -> Option<Draw> {
        let mut rng = sim::stream_rng(seed, rep as u64, 0);
        let brows = sim::draw_random_rows(&mut rng, q, &sigma, design.random_dist).ok()?;
        let mut draw = Draw { j_beta: Vec::new(), j_b: Vec::new(), beta_bar: Vec::new(), beta_refit: Vec::new() };
        for (jm, m) in design.marginals.iter().enumerate() {
            let f = &fit.marginals[jm];
            let w = &fit.working[jm];
            let bcol = DVector::from_iterator(q, brows.column(jm).iter().copied());
            let st = estimator::linear_predictor(&w.beta, std::slice::from_ref(&bcol), &m.x, &comps, m.link).ok()?;
            let start = WorkingState { beta: w.beta.clone(), b: vec![crate::estimator::project_zero_mean(&bcol)] };

            let mut noisy = m.clone();
            for i in 0..m.n() {
                noisy.y[i] = m.family.sample(st.mu[i], f.lambda, m.weights[i], &mut rng).ok()?;
            }
            let (rf, rb) = fit_marginal_from(&noisy, &comps, Some(&start), &inner).ok()?;
            if !rf.converged {
                return None;
            }
            let g = godambe_marginal(&noisy, &comps, &rf.beta, &rb, rf.lambda, Mode::Empirical).ok()?;

            let mut clean = m.clone();
            clean.y = st.mu.clone();
            let (cf, _) = fit_marginal_from(&clean, &comps, Some(&start), &inner).ok()?;
            if !cf.converged {
                return None;
            }
            draw.j_beta.push(g.blocks.j_inv_beta.clone());
            draw.j_b.push(g.sigma_b());
            draw.beta_bar.push(cf.beta);
            draw.beta_refit.push(rf.beta);
        }
        Some(draw)
    };
    let results: Vec<Option<Draw>> = (0..n_mc).into_par_iter().map(one).collect();
    let n_failed = results.iter().filter(|r| r.is_none()).count();
    if n_mc == 0 || n_failed as f64 > 0.05 * n_mc as f64 {
        return Err(Error::NonConvergence(format!("{n_failed} of {n_mc} Monte Carlo refits failed")));
    }
    let draws: Vec<Draw> = results.into_iter().flatten().collect();
    let n_used = draws.len();
    let mut marginals = Vec::with_capacity(d);
    for jm in 0..d {
        let k = design.marginals[jm].k();
        let mean_j_inv_beta = draws.iter().fold(DMatrix::zeros(k, k), |a, dr| a + &dr.j_beta[jm]) / n_used as f64;
        let mean_j_inv_b = draws.iter().fold(DMatrix::zeros(q, q), |a, dr| a + &dr.j_b[jm]) / n_used as f64;
        let bars: Vec<DVector<f64>> = draws.iter().map(|dr| dr.beta_bar[jm].clone()).collect();
        let refits: Vec<DVector<f64>> = draws.iter().map(|dr| dr.beta_refit[jm].clone()).collect();
        let var_beta_bar = sample_cov(&bars);
        let var_beta_refit = sample_cov(&refits);
        let av_beta = &mean_j_inv_beta + &var_beta_bar;
        let av_b = &mean_j_inv_b + DMatrix::identity(q, q) * sigma[(jm, jm)];
        marginals.push(MarginalAv { mean_j_inv_beta, var_beta_bar, var_beta_refit, av_beta, mean_j_inv_b, av_b });
    }
    Ok(UnconditionalAv { marginals, n_used, n_failed })
}

#[derive(Debug, Clone)]
pub struct RegularityReport {
    /// Monte Carlo mean of each ψ* coordinate at the truth.
    pub psi_mean: DVector<f64>,
    pub psi_se: DVector<f64>,
    /// max |mean / se| over coordinates with positive se.
    pub max_abs_z: f64,
    /// Max relative error of the analytic Jacobian against central differences.
    pub jacobian_rel_error: f64,
    /// Smallest eigenvalue of V in contrast coordinates.
    pub v_min_eigenvalue: f64,
    /// Smallest singular value of S in contrast coordinates.
    pub s_min_singular_value: f64,
}

/// Regularity diagnostics for one marginal at known parameter values.
pub fn check_regularity(
    m: &MarginalDesign,
    comps: &[&ClusterComponent],
    beta: &DVector<f64>,
    b: &[DVector<f64>],
    lambda: f64,
    n_mc: usize,
    seed: u64,
) -> Result<RegularityReport> {
    let st = estimator::linear_predictor(beta, b, &m.x, comps, m.link)?;
    let k = m.k();
    let p = *component_offsets(comps, k).last().unwrap();
    let psis: Vec<Result<DVector<f64>>> = (0..n_mc)
        .into_par_iter()
        .map(|rep| {
            let mut rng = sim::stream_rng(seed, rep as u64, 1);
            let mut sim_m = m.clone();
            for i in 0..m.n() {
                sim_m.y[i] = m.family.sample(st.mu[i], lambda, m.weights[i], &mut rng)?;
            }
            let (pb, pr) = inference_functions(&sim_m, comps, beta, b)?;
            let mut v = DVector::zeros(p);
            v.rows_mut(0, k).copy_from(&pb);
            let mut at = k;
            for r in pr {
                v.rows_mut(at, r.len()).copy_from(&r);
                at += r.len();
            }
            Ok(v)
        })
        .collect();
    let psis: Vec<DVector<f64>> = psis.into_iter().collect::<Result<_>>()?;
    let n = psis.len() as f64;
    let mean = psis.iter().fold(DVector::zeros(p), |a, v| a + v) / n;
    let var = psis.iter().fold(DVector::zeros(p), |a, v| a + (v - &mean).map(|x| x * x)) / (n - 1.0);
    let se = var.map(|v| (v / n).sqrt());
    let max_abs_z = mean.iter().zip(se.iter()).filter(|(_, s)| **s > 0.0).fold(0.0f64, |a, (m, s)| a.max((m / s).abs()));

    // Central differences of the stacked inference functions.
    let analytic = estimator::jacobian(m, comps, beta, b)?;
    let stack = |beta: &DVector<f64>, b: &[DVector<f64>]| -> Result<DVector<f64>> {
        let (pb, pr) = inference_functions(m, comps, beta, b)?;
        let mut v = DVector::zeros(p);
        v.rows_mut(0, k).copy_from(&pb);
        let mut at = k;
        for r in pr {
            v.rows_mut(at, r.len()).copy_from(&r);
            at += r.len();
        }
        Ok(v)
    };
    let mut numeric = DMatrix::zeros(p, p);
    for col in 0..p {
        let mut bp = beta.clone();
        let mut bm = beta.clone();
        let mut vp: Vec<DVector<f64>> = b.to_vec();
        let mut vm: Vec<DVector<f64>> = b.to_vec();
        let base = if col < k { beta[col] } else { locate(b, col - k) };
        let h = 1e-6 * base.abs().max(1.0);
        if col < k {
            bp[col] += h;
            bm[col] -= h;
        } else {
            *locate_mut(&mut vp, col - k) += h;
            *locate_mut(&mut vm, col - k) -= h;
        }
        let d = (stack(&bp, &vp)? - stack(&bm, &vm)?) / (2.0 * h);
        numeric.set_column(col, &d);
    }
    let scale = analytic.abs().max().max(1e-300);
    let jacobian_rel_error = (&analytic - &numeric).abs().max() / scale;

    let (s, v) = sensitivity_variability(m, comps, beta, b, lambda, Mode::Empirical)?;
    let t = block_diag(&[DMatrix::identity(k, k), contrast_basis(comps)]);
    let sc = t.transpose() * &s * &t;
    let vc = t.transpose() * &v * &t;
    Ok(RegularityReport {
        psi_mean: mean,
        psi_se: se,
        max_abs_z,
        jacobian_rel_error,
        v_min_eigenvalue: linalg::min_eigenvalue(&vc),
        s_min_singular_value: sc.svd(false, false).singular_values.min(),
    })
}

fn locate(b: &[DVector<f64>], mut idx: usize) -> f64 {
    for v in b {
        if idx < v.len() {
            return v[idx];
        }
        idx -= v.len();
    }
    unreachable!("index within stacked components")
}

fn locate_mut(b: &mut [DVector<f64>], mut idx: usize) -> &mut f64 {
    for v in b.iter_mut() {
        if idx < v.len() {
            return &mut v[idx];
        }
        idx -= v.len();
    }
    unreachable!("index within stacked components")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{Family, Link};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    }

    #[test]
    fn block_assembly_matches_dense_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_spd(&mut rng, 7);
        let v = random_spd(&mut rng, 7);
        let g = GodambeBlocks::assemble(&s, &v, 3).unwrap();
        let si = s.clone().try_inverse().unwrap();
        let dense = &si * &v * si.transpose();
        assert!((g.j_inv() - dense).abs().max() < 1e-10);
        assert!((&g.d - g.w.clone().try_inverse().unwrap()).abs().max() < 1e-12);
    }

    #[test]
    fn no_fixed_effects_reduces_to_plain_sandwich() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_spd(&mut rng, 4);
        let v = random_spd(&mut rng, 4);
        let g = GodambeBlocks::assemble(&s, &v, 0).unwrap();
        let si = s.clone().try_inverse().unwrap();
        assert!((&g.j_inv_b - &si * &v * si.transpose()).abs().max() < 1e-12);
        assert_eq!(g.j_inv_beta.shape(), (0, 0));
    }

    #[test]
    fn model_based_ols_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 25;
        let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let m = MarginalDesign::new("y", Family::Normal, Link::Identity, y, x.clone());
        let lambda = 0.7;
        let (s, v) = sensitivity_variability(&m, &[], &DVector::zeros(3), &[], lambda, Mode::ModelBased).unwrap();
        let g = GodambeBlocks::assemble(&s, &v, 3).unwrap();
        let oracle = (x.transpose() * &x).try_inverse().unwrap() * lambda;
        assert!((g.j_inv_beta - oracle).abs().max() < 1e-10);
    }

    #[test]
    fn singular_blocks_are_reported() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let v = DMatrix::identity(2, 2);
        match GodambeBlocks::assemble(&s, &v, 1) {
            Err(Error::Singular(msg)) => assert!(msg.contains("W")),
            other => panic!("expected singular W, got {other:?}"),
        }
    }
}
