use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nets::TaskKind;
use crate::numkit::Matrix;

/// Units with covariates, a factual treatment and outcome, and (for
/// simulated data) every potential outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationalDataset {
    /// Covariates, `n x p`.
    pub x: Matrix,
    /// Treatment index per unit, in `0..k`.
    pub t: Vec<usize>,
    /// Observed outcome per unit.
    pub y: Vec<f64>,
    /// All potential outcomes `n x k`, when known.
    pub y_all: Option<Matrix>,
    pub kind: TaskKind,
    pub k: usize,
}

impl ObservationalDataset {
    pub fn new(
        x: Matrix,
        t: Vec<usize>,
        y: Vec<f64>,
        y_all: Option<Matrix>,
        kind: TaskKind,
        k: usize,
    ) -> Result<Self> {
        let d = Self { x, t, y, y_all, kind, k };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if self.t.len() != n || self.y.len() != n {
            return Err(shape_err(
                "dataset rows",
                n,
                format!("{} treatments / {} outcomes", self.t.len(), self.y.len()),
            ));
        }
        if self.k < 1 {
            return Err(Error::InvalidArgument("treatment count must be positive".into()));
        }
        if let Some(bad) = self.t.iter().find(|&&t| t >= self.k) {
            return Err(Error::InvalidArgument(format!("treatment {bad} out of range for k={}", self.k)));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("factual outcomes".into()));
        }
        if let Some(ya) = &self.y_all {
            if ya.shape() != (n, self.k) {
                return Err(shape_err("potential outcomes", format!("{n}x{}", self.k), format!("{:?}", ya.shape())));
            }
            for i in 0..n {
                let expect = ya.get(i, self.t[i]);
                if (expect - self.y[i]).abs() > 1e-9 * (1.0 + expect.abs()) {
                    return Err(Error::InvalidArgument(format!(
                        "row {i}: factual outcome {} differs from potential outcome {expect} of its treatment",
                        self.y[i]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    /// Row indices of each treatment group, in ascending order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.k];
        for (i, &t) in self.t.iter().enumerate() {
            g[t].push(i);
        }
        g
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &t in &self.t {
            s[t] += 1;
        }
        s
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            y_all: self.y_all.as_ref().map(|m| m.select_rows(idx)),
            kind: self.kind,
            k: self.k,
        }
    }

    /// Same units with covariates replaced.
    pub fn with_covariates(&self, x: Matrix) -> Result<Self> {
        if x.rows() != self.n() {
            return Err(shape_err("with_covariates", self.n(), x.rows()));
        }
        Ok(Self { x, ..self.clone() })
    }

    pub fn require_potential_outcomes(&self, what: &'static str) -> Result<&Matrix> {
        self.y_all.as_ref().ok_or(Error::MissingPotentialOutcomes(what))
    }
}

/// Column-wise standardisation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Fits means and (population) standard deviations. Columns with zero
    /// spread get `sd = 1`, so they standardise to all zeros.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let p = x.cols();
        let mut mean = vec![0.0; p];
        for r in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for r in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, sd }
    }

    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            sd: vec![1.0; p],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(shape_err("standardize", self.mean.len(), x.cols()));
        }
        let mut out = x.clone();
        let p = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % p;
            *v = (*v - self.mean[c]) / self.sd[c];
        }
        Ok(out)
    }
}
