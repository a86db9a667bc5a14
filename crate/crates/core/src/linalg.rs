//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Numerical rank with tolerance `rel_tol * largest singular value`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Solve `a x = b` by LU, failing on (numerically) singular `a`.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("{}x{} system", a.nrows(), a.ncols())))
}

pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(format!("{}x{} matrix", a.nrows(), a.ncols())))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetric eigenvalues floored at `floor`; returns the repaired matrix and
/// whether any eigenvalue was raised.
pub fn psd_floor(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let mut changed = false;
    let vals = eig.eigenvalues.map(|v| {
        if v < floor {
            changed = true;
            floor
        } else {
            v
        }
    });
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (out, changed)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Orthonormal basis of the mean-zero subspace of ℝ^q (a q × (q-1) Helmert matrix).
pub fn zero_mean_basis(q: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(q, q.saturating_sub(1));
    for j in 1..q {
        let scale = 1.0 / ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            c[(i, j - 1)] = scale;
        }
        c[(j, j - 1)] = -(j as f64) * scale;
    }
    c
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `log N(x; 0, cov)` via Cholesky.
pub fn gaussian_log_density(x: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
    let l = chol.l();
    let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let z = chol.solve(x);
    let n = x.len() as f64;
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + x.dot(&z)))
}

/// Lower-triangular factor parameterisation: `theta` holds log-diagonal
/// entries and raw off-diagonals, row by row.
pub fn chol_from_params(theta: &[f64], d: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[k].exp() } else { theta[k] };
            k += 1;
        }
    }
    l
}

pub fn params_from_cov(cov: &DMatrix<f64>) -> Vec<f64> {
    let d = cov.nrows();
    let (fixed, _) = psd_floor(cov, 1e-10);
    let l = fixed.cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::identity(d, d) * 1e-5);
    let mut theta = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            theta.push(if i == j { l[(i, j)].max(1e-300).ln() } else { l[(i, j)] });
        }
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helmert_basis_is_orthonormal_and_mean_zero() {
        for q in 1..8 {
            let c = zero_mean_basis(q);
            let ctc = c.transpose() * &c;
            assert!((ctc - DMatrix::identity(q - 1, q - 1)).abs().max() < 1e-14);
            for j in 0..q.saturating_sub(1) {
                assert!(c.column(j).sum().abs() < 1e-14);
            }
            // C Cᵀ is the centring projection.
            let p = &c * c.transpose();
            let centre = DMatrix::identity(q, q) - DMatrix::from_element(q, q, 1.0 / q as f64);
            assert!((p - centre).abs().max() < 1e-14);
        }
    }

    #[test]
    fn rank_detects_duplicate_columns() {
        let m = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0, 1.0, 0.0, 0.0]);
        assert_eq!(numerical_rank(&m, 1e-10), 2);
    }

    #[test]
    fn chol_params_round_trip() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.28, 0.09, 0.09, 0.12]);
        let theta = params_from_cov(&cov);
        let l = chol_from_params(&theta, 2);
        assert!((&l * l.transpose() - cov).abs().max() < 1e-14);
    }
}
