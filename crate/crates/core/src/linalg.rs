//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// In-place `0.5 * (M + M^T)`.
pub fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// Builds a matrix from row-major nested rows. Returns `None` on ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return None;
    }
    Some(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn diag(values: &[f64]) -> Mat {
    Mat::from_diagonal(&Vector::from_column_slice(values))
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

pub fn is_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Symmetric square root factor `L` with `L L^T = m`, for PSD `m`.
///
/// Uses Cholesky when `m` is positive definite and falls back to an
/// eigendecomposition with negative eigenvalues clipped to zero.
pub fn psd_factor(m: &Mat) -> Mat {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&sqrt_vals)
}

/// Infinite-horizon discrete LQR gain `K` (applied as `u = K x`) from the
/// fixed-point iteration of the Riccati difference equation.
pub fn dlqr(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    let mut p = q.clone();
    for _ in 0..10_000 {
        let s = r + b.tr_mul(&(&p * b));
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Numerical("dlqr: R + B'PB is not positive definite".into()))?;
        let k = -chol.solve(&b.tr_mul(&(&p * a)));
        let acl = a + b * &k;
        let mut next = q + k.tr_mul(&(r * &k)) + acl.tr_mul(&(&p * &acl));
        symmetrize(&mut next);
        let change = (&next - &p).amax();
        p = next;
        if change <= 1e-12 * p.amax().max(1.0) {
            return Ok(k);
        }
    }
    Err(Error::Numerical("dlqr: Riccati iteration did not converge".into()))
}
