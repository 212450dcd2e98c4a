//! Effect-estimation metrics over potential-outcome matrices.

use crate::error::{shape_err, Error, Result};
use crate::numkit::Matrix;

fn check(y_true: &Matrix, y_hat: &Matrix, context: &'static str) -> Result<()> {
    if y_true.shape() != y_hat.shape() {
        return Err(shape_err(context, format!("{:?}", y_true.shape()), format!("{:?}", y_hat.shape())));
    }
    if y_true.rows() == 0 {
        return Err(Error::EmptyInput(context));
    }
    Ok(())
}

fn check_binary(y_true: &Matrix, y_hat: &Matrix, context: &'static str) -> Result<()> {
    check(y_true, y_hat, context)?;
    if y_true.cols() != 2 {
        return Err(Error::InvalidArgument(format!("{context} needs exactly 2 treatments, got {}", y_true.cols())));
    }
    Ok(())
}

/// Root of the mean squared error between true and estimated unit effects
/// `y1 - y0`.
pub fn sqrt_pehe(y_true: &Matrix, y_hat: &Matrix) -> Result<f64> {
    check_binary(y_true, y_hat, "sqrt_pehe")?;
    let n = y_true.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let d = (y_true.get(i, 1) - y_true.get(i, 0)) - (y_hat.get(i, 1) - y_hat.get(i, 0));
        acc += d * d;
    }
    Ok((acc / n as f64).sqrt())
}

/// Absolute error of the average treatment effect.
pub fn ate_error(y_true: &Matrix, y_hat: &Matrix) -> Result<f64> {
    check_binary(y_true, y_hat, "ate_error")?;
    let n = y_true.rows() as f64;
    let mut t = 0.0;
    let mut h = 0.0;
    for i in 0..y_true.rows() {
        t += y_true.get(i, 1) - y_true.get(i, 0);
        h += y_hat.get(i, 1) - y_hat.get(i, 0);
    }
    Ok((t / n - h / n).abs())
}

/// Root mean squared error over every unit and treatment.
pub fn rmse_multi(y_true: &Matrix, y_hat: &Matrix) -> Result<f64> {
    check(y_true, y_hat, "rmse_multi")?;
    if y_true.cols() < 2 {
        return Err(Error::InvalidArgument("rmse_multi needs at least 2 treatments".into()));
    }
    let sq: f64 = y_true.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq / y_true.len() as f64).sqrt())
}
