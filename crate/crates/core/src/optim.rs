//! Generic smooth optimisers used by the variance and baseline estimators:
//! quasi-Newton (BFGS) minimisation and bracketed 1-D maximisation.

/// Outcome of a minimisation.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Relative change in objective treated as stagnation.
    pub f_tol: f64,
    /// Largest coordinate change per iteration.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-7, max_iter: 500, f_tol: 1e-14, max_step: f64::INFINITY }
    }
}

/// Central-difference gradient.
pub fn numeric_gradient(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        xs[i] = x[i] + h;
        let fp = f(&xs);
        xs[i] = x[i] - h;
        let fm = f(&xs);
        xs[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Hessian of a scalar function.
pub fn numeric_hessian(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut h = vec![vec![0.0; n]; n];
    let mut xs = x.to_vec();
    let steps: Vec<f64> = x.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
    let f0 = f(x);
    for i in 0..n {
        xs[i] = x[i] + steps[i];
        let fp = f(&xs);
        xs[i] = x[i] - steps[i];
        let fm = f(&xs);
        xs[i] = x[i];
        h[i][i] = (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                xs[i] = x[i] + si * steps[i];
                xs[j] = x[j] + sj * steps[j];
                let v = f(&xs);
                xs[i] = x[i];
                xs[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * steps[i] * steps[j]);
            h[i][j] = v;
            h[j][i] = v;
        }
    }
    h
}

/// BFGS with a backtracking Armijo line search. `fg` returns the objective
/// and its gradient; non-finite objective values are treated as +∞.
pub fn bfgs(mut fg: impl FnMut(&[f64]) -> (f64, Vec<f64>), x0: &[f64], opts: BfgsOptions) -> Minimum {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = fg(&x);
    let mut hinv = identity(n);
    let mut iterations = 0;
    let mut converged = false;
    if n == 0 {
        return Minimum { x, value: fx, grad_norm: 0.0, iterations: 0, converged: true };
    }
    while iterations < opts.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm <= opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut dir: Vec<f64> = mat_vec(&hinv, &g).iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hinv = identity(n);
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }
        let mut step = (opts.max_step / inf_norm(&dir)).min(1.0);
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fnew, gnew) = fg(&xn);
            // Below rounding noise in f, fall back to a decrease in |g|.
            let noise = 64.0 * f64::EPSILON * fx.abs().max(1.0);
            let flat = fnew.is_finite() && fnew <= fx + noise && inf_norm(&gnew) < inf_norm(&g);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope || flat {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let rel_change = (fx - fnew).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gnew;
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            bfgs_update(&mut hinv, &s, &y, sy);
        }
        if rel_change < opts.f_tol && inf_norm(&s) < 1e-12 * (1.0 + inf_norm(&x)) {
            converged = inf_norm(&g) <= opts.grad_tol * 100.0;
            break;
        }
    }
    let grad_norm = inf_norm(&g);
    converged |= grad_norm <= opts.grad_tol;
    Minimum { x, value: fx, grad_norm, iterations, converged }
}

/// BFGS with central-difference gradients.
pub fn bfgs_numeric(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], opts: BfgsOptions) -> Minimum {
    bfgs(
        |x| {
            let v = f(x);
            let g = if v.is_finite() { numeric_gradient(&mut f, x) } else { vec![0.0; x.len()] };
            (v, g)
        },
        x0,
        opts,
    )
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Maximise a unimodal-on-bracket function by golden-section search.
/// Returns `(argmax, max)`.
pub fn golden_max(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while (hi - lo).abs() > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Root of a continuous function on a sign-changing bracket (bisection with
/// secant acceleration).
pub fn bracketed_root(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Option<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    let mut fhi = fhi;
    for _ in 0..200 {
        let secant = hi - fhi * (hi - lo) / (fhi - flo);
        let mid = 0.5 * (lo + hi);
        let x = if secant.is_finite() && secant > lo && secant < hi { 0.5 * (secant + mid) } else { mid };
        let fx = f(x);
        if fx == 0.0 || (hi - lo).abs() < tol * (1.0 + x.abs()) {
            return Some(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
        } else {
            hi = x;
            fhi = fx;
        }
    }
    Some(0.5 * (lo + hi))
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
