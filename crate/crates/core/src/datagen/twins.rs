//! Twins-style benchmark simulator.
//!
//! Each unit is a twin pair. Covariates mix continuous and binary draws
//! sharing a latent factor. Each potential outcome is one-year mortality,
//! produced by thresholding a latent score at the empirical quantile that
//! gives the target mortality rate. The scores of a pair share a unit-level
//! component so outcomes of the two twins agree most of the time.
//! Selection bias hides one twin: `t ~ Bern(sigmoid(w'x + noise))` with
//! `w ~ U(-0.1, 0.1)^p` (softmax over per-treatment scores for four arms).

use serde::{Deserialize, Serialize};

use super::dataset::ObservationalDataset;
use crate::error::{Error, Result};
use crate::nets::TaskKind;
use crate::numkit::{sigmoid, Matrix, RngStream};

/// Labels of the four-arm variant, indexed by treatment.
pub const TWINS_FOUR_LABELS: [&str; 4] = [
    "lower weight / female",
    "lower weight / male",
    "higher weight / female",
    "higher weight / male",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinsBinConfig {
    pub n_pairs: usize,
    pub p: usize,
    /// Half-width of the uniform assignment weights.
    pub weight_bound: f64,
    /// Standard deviation of the assignment noise.
    pub noise_sd: f64,
    /// Mortality of the lighter twin (t = 0).
    pub lighter_rate: f64,
    /// Mortality of the heavier twin (t = 1).
    pub heavier_rate: f64,
    /// Share of latent outcome noise common to both twins, in `[0, 1]`.
    pub coupling: f64,
}

impl Default for TwinsBinConfig {
    fn default() -> Self {
        Self {
            n_pairs: 11400,
            p: 30,
            weight_bound: 0.1,
            noise_sd: 0.1,
            lighter_rate: 0.177,
            heavier_rate: 0.161,
            coupling: DEFAULT_COUPLING,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinsFourConfig {
    pub n: usize,
    pub p: usize,
    pub weight_bound: f64,
    pub noise_sd: f64,
    /// Multiplies every assignment score; 0 gives uniform assignment.
    pub bias_scale: f64,
    /// Mortality per arm, in [`TWINS_FOUR_LABELS`] order.
    pub rates: [f64; 4],
    pub coupling: f64,
}

impl Default for TwinsFourConfig {
    fn default() -> Self {
        Self {
            n: 11984,
            p: 50,
            weight_bound: 0.1,
            noise_sd: 0.1,
            bias_scale: 1.0,
            rates: [0.170, 0.184, 0.154, 0.168],
            coupling: DEFAULT_COUPLING,
        }
    }
}

/// Chosen so that the two twins disagree on roughly 10% of pairs.
pub const DEFAULT_COUPLING: f64 = 0.85;

/// Probability of observing the heavier twin: `sigmoid(w'x + noise)`.
pub fn assignment_probability(x: &[f64], w: &[f64], noise: f64) -> f64 {
    sigmoid(x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + noise)
}

/// Covariates with a shared latent factor: the first third continuous,
/// the rest binary.
fn covariates(n: usize, p: usize, rng: &mut RngStream) -> Matrix {
    let n_cont = p.div_ceil(3);
    let loadings: Vec<f64> = (0..p).map(|_| rng.uniform_range(0.2, 0.8)).collect();
    let offsets: Vec<f64> = (0..p).map(|_| rng.uniform_range(-1.5, 0.5)).collect();
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        let f = rng.normal(0.0, 1.0);
        for j in 0..p {
            let v = if j < n_cont {
                loadings[j] * f + (1.0 - loadings[j] * loadings[j]).sqrt() * rng.normal(0.0, 1.0)
            } else {
                let pr = sigmoid(offsets[j] + loadings[j] * f);
                f64::from(u8::from(rng.bernoulli(pr)))
            };
            data.push(v);
        }
    }
    Matrix::raw(n, p, data)
}

/// Latent mortality scores for `arms` potential outcomes, thresholded to the
/// requested rates.
fn outcomes(x: &Matrix, rates: &[f64], arm_effects: &[Vec<f64>], coupling: f64, rng: &mut RngStream) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&coupling) {
        return Err(Error::InvalidArgument(format!("coupling must lie in [0,1], got {coupling}")));
    }
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::InvalidArgument(format!("mortality rate must lie in (0,1), got {r}")));
    }
    let (n, p) = x.shape();
    let risk: Vec<f64> = (0..p).map(|_| rng.normal(0.0, 0.6 / (p as f64).sqrt())).collect();
    let shared_sd = coupling.sqrt();
    let own_sd = (1.0 - coupling).sqrt();
    let arms = rates.len();
    let mut latent = vec![vec![0.0; n]; arms];
    for i in 0..n {
        let row = x.row(i);
        let base: f64 = row.iter().zip(&risk).map(|(a, b)| a * b).sum();
        let u = rng.normal(0.0, 1.0);
        for a in 0..arms {
            let het: f64 = row.iter().zip(&arm_effects[a]).map(|(v, b)| v * b).sum();
            latent[a][i] = base + het + shared_sd * u + own_sd * rng.normal(0.0, 1.0);
        }
    }
    let mut y = Matrix::zeros(n, arms);
    for (a, scores) in latent.iter().enumerate() {
        let deaths = (rates[a] * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        // Highest latent scores die; ties broken by index for determinism.
        order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
        for &i in order.iter().take(deaths) {
            y.set(i, a, 1.0);
        }
    }
    Ok(y)
}

/// Binary Twins benchmark: `t = 1` heavier twin, `t = 0` lighter twin.
pub fn gen_twins_binary(cfg: &TwinsBinConfig, rng: &mut RngStream) -> Result<ObservationalDataset> {
    if cfg.n_pairs < 1 || cfg.p < 1 {
        return Err(Error::InvalidArgument("twins generator needs n_pairs >= 1 and p >= 1".into()));
    }
    let mut cov_rng = rng.substream("covariates");
    let mut out_rng = rng.substream("outcomes");
    let mut asg_rng = rng.substream("assignment");

    let x = covariates(cfg.n_pairs, cfg.p, &mut cov_rng);
    let effects = vec![
        vec![0.0; cfg.p],
        (0..cfg.p).map(|_| out_rng.normal(0.0, 0.15 / (cfg.p as f64).sqrt())).collect(),
    ];
    let y_all = outcomes(&x, &[cfg.lighter_rate, cfg.heavier_rate], &effects, cfg.coupling, &mut out_rng)?;

    let w: Vec<f64> = (0..cfg.p)
        .map(|_| asg_rng.uniform_range(-cfg.weight_bound, cfg.weight_bound))
        .collect();
    let mut t = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let noise = asg_rng.normal(0.0, cfg.noise_sd);
        let pr = assignment_probability(x.row(i), &w, noise);
        t.push(usize::from(asg_rng.bernoulli(pr)));
    }
    let y = t.iter().enumerate().map(|(i, &ti)| y_all.get(i, ti)).collect();
    ObservationalDataset::new(x, t, y, Some(y_all), TaskKind::Classification, 2)
}

/// Four-arm Twins benchmark (birth weight x sex), assignment by a softmax
/// over linear scores.
pub fn gen_twins_four(cfg: &TwinsFourConfig, rng: &mut RngStream) -> Result<ObservationalDataset> {
    if cfg.n < 4 || cfg.p < 1 {
        return Err(Error::InvalidArgument("four-arm twins generator needs n >= 4 and p >= 1".into()));
    }
    let mut cov_rng = rng.substream("covariates");
    let mut out_rng = rng.substream("outcomes");
    let mut asg_rng = rng.substream("assignment");

    let x = covariates(cfg.n, cfg.p, &mut cov_rng);
    let sd = 0.15 / (cfg.p as f64).sqrt();
    let effects: Vec<Vec<f64>> = (0..4)
        .map(|a| {
            if a == 0 {
                vec![0.0; cfg.p]
            } else {
                (0..cfg.p).map(|_| out_rng.normal(0.0, sd)).collect()
            }
        })
        .collect();
    let y_all = outcomes(&x, &cfg.rates, &effects, cfg.coupling, &mut out_rng)?;

    let w: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            (0..cfg.p)
                .map(|_| asg_rng.uniform_range(-cfg.weight_bound, cfg.weight_bound))
                .collect()
        })
        .collect();
    let mut t = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let row = x.row(i);
        let scores: Vec<f64> = w
            .iter()
            .map(|wj| {
                let s: f64 = row.iter().zip(wj).map(|(a, b)| a * b).sum();
                cfg.bias_scale * (s + asg_rng.normal(0.0, cfg.noise_sd))
            })
            .collect();
        t.push(asg_rng.categorical(&softmax(&scores)));
    }
    let y = t.iter().enumerate().map(|(i, &ti)| y_all.get(i, ti)).collect();
    ObservationalDataset::new(x, t, y, Some(y_all), TaskKind::Classification, 4)
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
