//! News-style benchmark simulator.
//!
//! Documents are points on a topic simplex drawn from a symmetric Dirichlet
//! (standing in for a fitted topic model); the covariates are the topic
//! proportions. `k` device centroids are drawn in the same space and `z_m`
//! is the mean topic vector of all documents. Potential outcomes are
//! `y_ij = C * (ytilde_ij * D(z_i, z_j) + D(z_i, z_m))` with `D` the
//! Euclidean distance and `ytilde_ij ~ N(mu, sigma) + N(0, 0.15)`, where
//! `mu ~ N(0.45, 0.15)` and `sigma ~ N(0.1, 0.05)` are drawn once per
//! dataset. Treatments follow `t_i ~ softmax(kappa * y_i)`.

use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use super::dataset::ObservationalDataset;
use super::twins::softmax;
use crate::error::{Error, Result};
use crate::nets::TaskKind;
use crate::numkit::{Matrix, RngStream};

/// Lower truncation of the outcome standard deviation draw.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewsConfig {
    pub n: usize,
    pub k: usize,
    pub topics: usize,
    /// Outcome scale `C`.
    pub c: f64,
    /// Assignment bias `kappa`.
    pub kappa: f64,
    /// Symmetric Dirichlet concentration of document topic proportions.
    pub dirichlet_alpha: f64,
}

impl Default for NewsConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            k: 2,
            topics: 50,
            c: 50.0,
            kappa: 10.0,
            dirichlet_alpha: 0.1,
        }
    }
}

fn dirichlet(rng: &mut RngStream, gamma: &Gamma<f64>, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(gamma)).collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        // Every gamma draw underflowed; fall back to a vertex of the simplex.
        let j = rng.index(dim);
        v.iter_mut().enumerate().for_each(|(i, x)| *x = f64::from(u8::from(i == j)));
    }
    v
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One potential outcome.
pub fn news_outcome(c: f64, ytilde: f64, z: &[f64], centroid: &[f64], mean_centroid: &[f64]) -> f64 {
    c * (ytilde * euclidean(z, centroid) + euclidean(z, mean_centroid))
}

/// Treatment probabilities `softmax(kappa * y)` for one unit.
pub fn assignment_probabilities(kappa: f64, outcomes: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = outcomes.iter().map(|y| kappa * y).collect();
    softmax(&s)
}

pub fn gen_news(cfg: &NewsConfig, rng: &mut RngStream) -> Result<ObservationalDataset> {
    if cfg.k < 2 {
        return Err(Error::InvalidArgument(format!("news generator needs k >= 2, got {}", cfg.k)));
    }
    if cfg.k > cfg.topics {
        return Err(Error::InvalidArgument(format!(
            "treatment count {} exceeds topic count {}",
            cfg.k, cfg.topics
        )));
    }
    if cfg.n < 1 {
        return Err(Error::InvalidArgument("news generator needs n >= 1".into()));
    }
    if !(cfg.dirichlet_alpha > 0.0) {
        return Err(Error::InvalidArgument("dirichlet_alpha must be positive".into()));
    }
    let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("dirichlet concentration: {e}")))?;
    let mut topic_rng = rng.substream("topics");
    let mut outcome_rng = rng.substream("outcomes");
    let mut assign_rng = rng.substream("assignment");

    let docs: Vec<Vec<f64>> = (0..cfg.n).map(|_| dirichlet(&mut topic_rng, &gamma, cfg.topics)).collect();
    let centroids: Vec<Vec<f64>> = (0..cfg.k).map(|_| dirichlet(&mut topic_rng, &gamma, cfg.topics)).collect();
    let mut mean_centroid = vec![0.0; cfg.topics];
    for d in &docs {
        for (m, v) in mean_centroid.iter_mut().zip(d) {
            *m += v / cfg.n as f64;
        }
    }

    let mu = outcome_rng.normal(0.45, 0.15);
    let sigma = outcome_rng.normal(0.1, 0.05).max(SIGMA_FLOOR);
    let mut y_all = Matrix::zeros(cfg.n, cfg.k);
    for (i, z) in docs.iter().enumerate() {
        for (j, cj) in centroids.iter().enumerate() {
            let ytilde = outcome_rng.normal(mu, sigma) + outcome_rng.normal(0.0, 0.15);
            y_all.set(i, j, news_outcome(cfg.c, ytilde, z, cj, &mean_centroid));
        }
    }

    let t: Vec<usize> = (0..cfg.n)
        .map(|i| assign_rng.categorical(&assignment_probabilities(cfg.kappa, y_all.row(i))))
        .collect();
    let y = t.iter().enumerate().map(|(i, &ti)| y_all.get(i, ti)).collect();
    let x = Matrix::from_vec(cfg.n, cfg.topics, docs.concat())?;
    ObservationalDataset::new(x, t, y, Some(y_all), TaskKind::Regression, cfg.k)
}
