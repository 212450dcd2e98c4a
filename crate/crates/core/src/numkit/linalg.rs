//! Least squares through the normal equations.

use super::matrix::Matrix;
use crate::error::{shape_err, Error, Result};

/// Ridge added to the Gram diagonal when the plain factorisation fails.
pub const RIDGE_JITTER: f64 = 1e-8;

/// Solution of a least-squares problem.
#[derive(Clone, Debug)]
pub struct LstsqFit {
    /// Coefficients, one per design column.
    pub coef: Vec<f64>,
    /// Ridge magnitude that had to be added (0 when none was needed).
    pub jitter: f64,
}

/// In-place Cholesky of a symmetric matrix stored row-major (`n x n`).
/// Returns `false` when the matrix is not numerically positive definite.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-12 * (1.0 + a[j * n + j].abs())) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Minimises `|design * coef - target|^2`. Falls back to a ridge of
/// [`RIDGE_JITTER`] (scaled by the mean Gram diagonal) when the normal
/// equations are singular.
pub fn least_squares(design: &Matrix, target: &[f64]) -> Result<LstsqFit> {
    if design.rows() != target.len() {
        return Err(shape_err("least_squares", design.rows(), target.len()));
    }
    if design.rows() == 0 {
        return Err(Error::EmptyInput("least_squares needs at least one row"));
    }
    let n = design.cols();
    let gram = design.matmul_t(design, true, false)?;
    let y = Matrix::raw(target.len(), 1, target.to_vec());
    let rhs = design.matmul_t(&y, true, false)?;

    let mut l = gram.data().to_vec();
    if cholesky(&mut l, n) {
        return Ok(LstsqFit {
            coef: cholesky_solve(&l, n, rhs.data()),
            jitter: 0.0,
        });
    }
    let scale = (0..n).map(|i| gram.get(i, i)).sum::<f64>() / n.max(1) as f64;
    let jitter = RIDGE_JITTER * scale.max(1.0);
    let mut l = gram.data().to_vec();
    for i in 0..n {
        l[i * n + i] += jitter;
    }
    if !cholesky(&mut l, n) {
        return Err(Error::InvalidArgument("normal equations are not positive definite even with ridge".into()));
    }
    Ok(LstsqFit {
        coef: cholesky_solve(&l, n, rhs.data()),
        jitter,
    })
}
