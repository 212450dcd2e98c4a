//! Closed-form baselines producing one potential-outcome column per
//! treatment.

use serde::{Deserialize, Serialize};

use crate::datagen::ObservationalDataset;
use crate::error::{shape_err, Error, Result};
use crate::numkit::{least_squares, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// One least-squares fit with the treatment one-hot encoded as features.
    OlsLr1,
    /// One least-squares fit per treatment group.
    OlsLr2,
    /// Mean outcome of the nearest neighbours within each treatment group.
    Knn,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::OlsLr1, BaselineKind::OlsLr2, BaselineKind::Knn];

    pub fn name(self) -> &'static str {
        match self {
            Self::OlsLr1 => "ols_lr1",
            Self::OlsLr2 => "ols_lr2",
            Self::Knn => "knn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineOptions {
    /// Neighbours averaged by k-NN.
    pub knn_k: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self { knn_k: 5 }
    }
}

#[derive(Clone, Debug)]
enum Model {
    Lr1 { coef: Vec<f64>, k: usize },
    Lr2 { coefs: Vec<Vec<f64>> },
    Knn { x: Matrix, y: Vec<f64>, groups: Vec<Vec<usize>>, knn_k: usize },
}

/// A fitted baseline.
#[derive(Clone, Debug)]
pub struct FittedBaseline {
    pub kind: BaselineKind,
    /// Largest ridge added to singular normal equations (0 if none).
    pub jitter: f64,
    input_dim: usize,
    model: Model,
}

/// Rows `[1, x]`.
fn with_intercept(x: &Matrix) -> Matrix {
    let (n, p) = x.shape();
    let mut d = Vec::with_capacity(n * (p + 1));
    for i in 0..n {
        d.push(1.0);
        d.extend_from_slice(x.row(i));
    }
    Matrix::from_vec(n, p + 1, d).expect("finite covariates")
}

/// Rows `[x, onehot(t)]`; the one-hot block carries the per-treatment intercepts.
fn lr1_design(x: &Matrix, t: &[usize], k: usize) -> Matrix {
    let (n, p) = x.shape();
    let mut d = Vec::with_capacity(n * (p + k));
    for i in 0..n {
        d.extend_from_slice(x.row(i));
        d.extend((0..k).map(|j| f64::from(u8::from(t[i] == j))));
    }
    Matrix::from_vec(n, p + k, d).expect("finite covariates")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn fit_baseline(kind: BaselineKind, train: &ObservationalDataset, opts: &BaselineOptions) -> Result<FittedBaseline> {
    let groups = train.groups();
    if kind != BaselineKind::OlsLr1 {
        if let Some(g) = groups.iter().position(Vec::is_empty) {
            return Err(Error::EmptyGroup(g));
        }
    }
    let (model, jitter) = match kind {
        BaselineKind::OlsLr1 => {
            let fit = least_squares(&lr1_design(&train.x, &train.t, train.k), &train.y)?;
            (Model::Lr1 { coef: fit.coef, k: train.k }, fit.jitter)
        }
        BaselineKind::OlsLr2 => {
            let mut coefs = Vec::with_capacity(groups.len());
            let mut jitter = 0.0f64;
            for rows in &groups {
                let y: Vec<f64> = rows.iter().map(|&i| train.y[i]).collect();
                let fit = least_squares(&with_intercept(&train.x.select_rows(rows)), &y)?;
                jitter = jitter.max(fit.jitter);
                coefs.push(fit.coef);
            }
            (Model::Lr2 { coefs }, jitter)
        }
        BaselineKind::Knn => {
            if opts.knn_k == 0 {
                return Err(Error::InvalidArgument("knn_k must be positive".into()));
            }
            (
                Model::Knn {
                    x: train.x.clone(),
                    y: train.y.clone(),
                    groups,
                    knn_k: opts.knn_k,
                },
                0.0,
            )
        }
    };
    Ok(FittedBaseline {
        kind,
        jitter,
        input_dim: train.p(),
        model,
    })
}

impl FittedBaseline {
    /// Potential-outcome estimates, `n x k`.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim {
            return Err(shape_err("baseline input", self.input_dim, x.cols()));
        }
        let n = x.rows();
        match &self.model {
            Model::Lr1 { coef, k } => {
                let p = self.input_dim;
                let mut out = Matrix::zeros(n, *k);
                for i in 0..n {
                    let base = dot(x.row(i), &coef[..p]);
                    for j in 0..*k {
                        out.set(i, j, base + coef[p + j]);
                    }
                }
                Ok(out)
            }
            Model::Lr2 { coefs } => {
                let mut out = Matrix::zeros(n, coefs.len());
                for i in 0..n {
                    for (j, c) in coefs.iter().enumerate() {
                        out.set(i, j, c[0] + dot(x.row(i), &c[1..]));
                    }
                }
                Ok(out)
            }
            Model::Knn {
                x: tx,
                y,
                groups,
                knn_k,
            } => {
                let mut out = Matrix::zeros(n, groups.len());
                let mut dist: Vec<(f64, usize)> = Vec::new();
                for i in 0..n {
                    let q = x.row(i);
                    for (j, rows) in groups.iter().enumerate() {
                        dist.clear();
                        dist.extend(rows.iter().map(|&r| {
                            let d: f64 = q.iter().zip(tx.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
                            (d, r)
                        }));
                        let m = (*knn_k).min(dist.len());
                        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                        if m < dist.len() {
                            dist.select_nth_unstable_by(m - 1, cmp);
                        }
                        let mean = dist[..m].iter().map(|&(_, r)| y[r]).sum::<f64>() / m as f64;
                        out.set(i, j, mean);
                    }
                }
                Ok(out)
            }
        }
    }
}
