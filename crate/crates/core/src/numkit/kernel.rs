//! Gaussian kernel and the squared maximum mean discrepancy.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{shape_err, Error, Result};

/// Smallest bandwidth returned by [`median_bandwidth`].
pub const BANDWIDTH_FLOOR: f64 = 1e-8;

/// `exp(-|a - b|^2 / (2 h^2))`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("gaussian_kernel", a.len(), b.len()));
    }
    check_bandwidth(bandwidth)?;
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-d2 / (2.0 * bandwidth * bandwidth)).exp())
}

fn check_bandwidth(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("kernel bandwidth must be positive, got {h}")));
    }
    Ok(())
}

fn check_pair(zs: &Matrix, zt: &Matrix) -> Result<()> {
    if zs.rows() == 0 || zt.rows() == 0 {
        return Err(Error::EmptyInput("mmd2 needs at least one row on each side"));
    }
    if zs.cols() != zt.cols() {
        return Err(shape_err("mmd2", format!("{} columns", zs.cols()), zt.cols()));
    }
    Ok(())
}

/// Biased (V-statistic) estimate of the squared MMD between the rows of
/// `zs` and `zt`, diagonal terms included.
pub fn mmd2(zs: &Matrix, zt: &Matrix, bandwidth: f64) -> Result<f64> {
    check_pair(zs, zt)?;
    check_bandwidth(bandwidth)?;
    let mut tape = Tape::new();
    let a = tape.constant(zs.clone());
    let b = tape.constant(zt.clone());
    let v = mmd2_on_tape(&mut tape, a, b, bandwidth);
    Ok(tape.scalar(v))
}

/// Median of all pairwise Euclidean distances over the pooled rows.
pub fn median_bandwidth(zs: &Matrix, zt: &Matrix) -> Result<f64> {
    if zs.cols() != zt.cols() && zs.rows() > 0 && zt.rows() > 0 {
        return Err(shape_err("median_bandwidth", zs.cols(), zt.cols()));
    }
    let rows: Vec<&[f64]> = (0..zs.rows())
        .map(|i| zs.row(i))
        .chain((0..zt.rows()).map(|i| zt.row(i)))
        .collect();
    if rows.len() < 2 {
        return Err(Error::EmptyInput("median_bandwidth needs at least two pooled rows"));
    }
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s: f64 = rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    Ok(med.max(BANDWIDTH_FLOOR))
}

/// Mean of the Gaussian Gram matrix between the rows of `a` and `b`.
fn mean_kernel(tape: &mut Tape, a: Var, b: Var, bandwidth: f64) -> Var {
    let (n, m) = (tape.shape(a).0, tape.shape(b).0);
    let a2 = tape.square(a);
    let na = tape.sum_cols(a2);
    let b2 = tape.square(b);
    let nb = tape.sum_cols(b2);
    let nbt = tape.transpose(nb);
    let ra = tape.broadcast_cols(na, m);
    let rb = tape.broadcast_rows(nbt, n);
    let ab = tape.matmul_t(a, b, false, true);
    let norms = tape.add(ra, rb);
    let cross = tape.scale(ab, -2.0);
    let d2 = tape.add(norms, cross);
    let scaled = tape.scale(d2, -1.0 / (2.0 * bandwidth * bandwidth));
    let k = tape.exp(scaled);
    tape.mean_all(k)
}

/// Squared MMD recorded on a tape so it can be differentiated with respect to
/// both embeddings. The bandwidth is a constant of the expression.
pub fn mmd2_on_tape(tape: &mut Tape, zs: Var, zt: Var, bandwidth: f64) -> Var {
    let kss = mean_kernel(tape, zs, zs, bandwidth);
    let kst = mean_kernel(tape, zs, zt, bandwidth);
    let ktt = mean_kernel(tape, zt, zt, bandwidth);
    let cross = tape.scale(kst, -2.0);
    let s = tape.add(kss, cross);
    tape.add(s, ktt)
}
