#![allow(dead_code)]

use mglmm::{ClusterComponent, Family, Link, MarginalDesign};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct Instance {
    pub m: MarginalDesign,
    pub comp: ClusterComponent,
    pub beta: DVector<f64>,
    /// Cluster effects on the linear-predictor scale, not centred.
    pub b: DVector<f64>,
}

/// Intercept plus `k − 1` standard-normal covariates, clusters of roughly
/// equal size, N(0, σ²) effects. Responses are Normal (unit variance) or
/// Poisson according to `family`.
pub fn instance(r: &mut ChaCha8Rng, family: Family, n: usize, q: usize, k: usize, beta: &[f64], sigma2: f64) -> Instance {
    assert_eq!(beta.len(), k);
    let z = Normal::new(0.0, 1.0).unwrap();
    let x = DMatrix::from_fn(n, k, |_, c| if c == 0 { 1.0 } else { z.sample(r) });
    let index: Vec<usize> = (0..n).map(|i| i % q).collect();
    let b = DVector::from_fn(q, |_, _| sigma2.sqrt() * z.sample(r));
    let beta = DVector::from_column_slice(beta);
    let eta = &x * &beta + DVector::from_fn(n, |i, _| b[index[i]]);
    let (link, y) = match family {
        Family::Normal => (Link::Identity, eta.map(|e| e + z.sample(r))),
        Family::Poisson => (Link::Log, eta.map(|e| Poisson::new(e.exp()).unwrap().sample(r))),
        other => panic!("no generator for {other}"),
    };
    let m = MarginalDesign::new("y", family, link, y, x);
    let comp = ClusterComponent::from_indices("g", index, q);
    Instance { m, comp, beta, b }
}

/// Draws y at fixed (β, b) for an existing instance.
pub fn redraw(r: &mut ChaCha8Rng, inst: &Instance) -> DVector<f64> {
    let eta = &inst.m.x * &inst.beta + DVector::from_fn(inst.m.n(), |i, _| inst.b[inst.comp.index[i]]);
    match inst.m.family {
        Family::Normal => eta.map(|e| e + r.sample::<f64, _>(rand_distr::StandardNormal)),
        Family::Poisson => eta.map(|e| Poisson::new(e.exp()).unwrap().sample(r)),
        other => panic!("no generator for {other}"),
    }
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

pub fn random_spd(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

/// Least squares in (β, b) subject to Σ b = 0, solved through the KKT system.
pub fn constrained_ls(x: &DMatrix<f64>, z: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let (k, q) = (x.ncols(), z.ncols());
    let p = k + q + 1;
    let mut a = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let w = DMatrix::from_fn(x.nrows(), k + q, |i, j| if j < k { x[(i, j)] } else { z[(i, j - k)] });
    a.view_mut((0, 0), (k + q, k + q)).copy_from(&(w.transpose() * &w));
    rhs.rows_mut(0, k + q).copy_from(&(w.transpose() * y));
    for j in 0..q {
        a[(k + j, p - 1)] = 1.0;
        a[(p - 1, k + j)] = 1.0;
    }
    let sol = a.full_piv_lu().solve(&rhs).expect("KKT system is nonsingular");
    (sol.rows(0, k).into_owned(), sol.rows(k, q).into_owned())
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// Adaptive Gauss–Kronrod (7/15) on [a, b] with absolute tolerance `tol`.
fn gk(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let s = f(c - h * XGK[j]) + f(c + h * XGK[j]);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    let (kron, gauss) = (kron * h, gauss * h);
    if (kron - gauss).abs() <= tol || depth == 0 {
        return kron;
    }
    gk(f, a, c, 0.5 * tol, depth - 1) + gk(f, c, b, 0.5 * tol, depth - 1)
}

/// log ∫_{ℝ^q} N(b̂; b, Σ_b̂) N(b; 0, σ²I) db by nested one-dimensional quadrature.
pub fn log_integral(b_hat: &DVector<f64>, sigma_b: &DMatrix<f64>, sigma2: f64) -> f64 {
    let q = b_hat.len();
    let chol = sigma_b.clone().cholesky().unwrap();
    let si = chol.inverse();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let logf = |b: &DVector<f64>| -> f64 {
        let r = b_hat - b;
        -0.5 * (r.dot(&(&si * &r)) + logdet + q as f64 * ln2pi) - 0.5 * (b.norm_squared() / sigma2 + q as f64 * (sigma2.ln() + ln2pi))
    };
    // Integration box around the posterior mode.
    let prec = &si + DMatrix::identity(q, q) / sigma2;
    let post = prec.clone().try_inverse().unwrap();
    let mode = &post * (&si * b_hat);
    let half = 10.0 * post.symmetric_eigen().eigenvalues.max().sqrt();
    let peak = logf(&mode);
    fn level(l: usize, b: &mut DVector<f64>, mode: &DVector<f64>, half: f64, g: &dyn Fn(&DVector<f64>) -> f64) -> f64 {
        let q = b.len();
        let mut inner = |t: f64| {
            b[l] = t;
            if l + 1 == q {
                g(b)
            } else {
                level(l + 1, &mut b.clone(), mode, half, g)
            }
        };
        gk(&mut inner, mode[l] - half, mode[l] + half, 1e-12 * (2.0 * half).powi((q - l) as i32), 30)
    }
    let g = |b: &DVector<f64>| (logf(b) - peak).exp();
    let mut b = mode.clone();
    level(0, &mut b, &mode, half, &g).ln() + peak
}
