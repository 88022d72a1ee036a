//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

/// Relative threshold on |R_ii| below which a design is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Least-squares solution from a Householder QR factorization.
#[derive(Debug, Clone)]
pub struct QrLeastSquares {
    pub coefficients: DVector<f64>,
    pub fitted: DVector<f64>,
    /// Diagonal of the hat matrix, from the thin Q factor.
    pub leverage: DVector<f64>,
}

/// Solve min ||y - X b|| by QR. Returns `None` when X is numerically rank
/// deficient (|R_ii| <= RANK_TOL * max |R_jj|) or has more columns than rows.
pub fn qr_least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<QrLeastSquares> {
    let (n, k) = x.shape();
    if k == 0 || n < k {
        return None;
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let q = qr.q();
    let rmax = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if rmax == 0.0 || (0..k).any(|i| r[(i, i)].abs() <= RANK_TOL * rmax) {
        return None;
    }
    let qty = q.transpose() * y;
    let coefficients = r.solve_upper_triangular(&qty)?;
    let fitted = x * &coefficients;
    let leverage = DVector::from_iterator(n, q.row_iter().map(|row| row.norm_squared()));
    Some(QrLeastSquares {
        coefficients,
        fitted,
        leverage,
    })
}

/// Prepend a column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

/// log det of a symmetric positive-definite matrix; `None` if not PD.
pub fn spd_log_det(a: &DMatrix<f64>) -> Option<f64> {
    let c = a.clone().cholesky()?;
    Some(2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Symmetric square root factor R with R^T R = A for a PSD matrix, negative
/// eigenvalues clamped to zero.
pub fn psd_root(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let mut r = eig.eigenvectors.transpose();
    for (i, mut row) in r.row_iter_mut().enumerate() {
        row *= eig.eigenvalues[i].max(0.0).sqrt();
    }
    r
}
