//! Robustness and ablation sweeps. Cells are independent and run on a
//! worker pool; results come back in cell order regardless of scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{mean_std, primary_metric, run_repeat, ExperimentSpec, Method, MetricsReport};
use crate::datagen::ImbalanceSpec;
use crate::error::{Error, Result};
use crate::meta_engine::MetaConfig;

/// One (method, fraction, repeat) result of a robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub fraction: f64,
    /// Control size over treated size, `1 / fraction`.
    pub imbalance_ratio: f64,
    pub method: Method,
    pub repeat: usize,
    pub seed: u64,
    pub sqrt_pehe: Option<f64>,
    pub ate_error: Option<f64>,
    pub rmse: Option<f64>,
    pub error: Option<String>,
}

/// One loss-weight combination and repeat of an ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mu: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub repeat: usize,
    pub seed: u64,
    pub metric: String,
    pub value: Option<f64>,
    pub error: Option<String>,
}

/// Mean score of one weight combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub mu: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

pub fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::InvalidArgument("no imbalance fractions given".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::InvalidArgument(format!("fraction {f} outside (0, 1]")));
    }
    Ok(())
}

/// All methods at one treated-group fraction; the control group is kept
/// whole. Failures become rows carrying the error text.
pub fn robustness_cell(
    spec: &ExperimentSpec,
    methods: &[Method],
    fraction: f64,
    config: &MetaConfig,
    seed: u64,
    repeat: usize,
) -> Vec<RobustnessRow> {
    let cell_spec = spec.dataset.treatment_count().map(|k| ExperimentSpec {
        imbalance: Some(ImbalanceSpec::treated_fraction(k, fraction)),
        ..spec.clone()
    });
    let row = |method: Method, r: Option<&MetricsReport>, error: Option<String>| RobustnessRow {
        fraction,
        imbalance_ratio: 1.0 / fraction,
        method,
        repeat,
        seed,
        sqrt_pehe: r.and_then(|r| r.sqrt_pehe),
        ate_error: r.and_then(|r| r.ate_error),
        rmse: r.map(|r| r.rmse),
        error,
    };
    methods
        .iter()
        .map(|&m| match cell_spec.as_ref().map_err(|e| e.to_string()).and_then(|s| {
            run_repeat(s, &[m], config, seed, repeat).map_err(|e| e.to_string())
        }) {
            Ok(reports) => row(m, reports.first(), None),
            Err(e) => row(m, None, Some(e)),
        })
        .collect()
}

/// Every method at every fraction for `repeats` seeds `base_seed + r`.
/// Rows are ordered by fraction, then repeat, then method.
pub fn robustness_sweep(
    spec: &ExperimentSpec,
    methods: &[Method],
    fractions: &[f64],
    config: &MetaConfig,
    repeats: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<Vec<RobustnessRow>> {
    check_fractions(fractions)?;
    let cells: Vec<(f64, usize)> = fractions
        .iter()
        .flat_map(|&f| (0..repeats).map(move |r| (f, r)))
        .collect();
    let rows: Vec<Vec<RobustnessRow>> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(f, r)| robustness_cell(spec, methods, f, config, base_seed + r as u64, r))
            .collect()
    });
    Ok(rows.into_iter().flatten().collect())
}

/// `0, step, 2 step, ..., 1` (inclusive), rounded to avoid drift.
pub fn weight_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidArgument(format!("grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n).map(|i| ((i as f64 * step).min(1.0) * 1e12).round() / 1e12).collect())
}

/// Cartesian product `(mu, epsilon, gamma)` over the same value list.
pub fn weight_combinations(values: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("loss weight {v} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(values.len().pow(3));
    for &m in values {
        for &e in values {
            for &g in values {
                out.push((m, e, g));
            }
        }
    }
    Ok(out)
}

/// MetaITE with one weight combination on one seed.
pub fn ablation_cell(
    spec: &ExperimentSpec,
    weights: (f64, f64, f64),
    config: &MetaConfig,
    seed: u64,
    repeat: usize,
) -> AblationRow {
    let (mu, epsilon, gamma) = weights;
    let cfg = config.with_weights(mu, epsilon, gamma);
    let (metric, value, error) = match run_repeat(spec, &[Method::MetaIte], &cfg, seed, repeat) {
        Ok(r) => {
            let metric = primary_metric(r[0].k);
            (metric.to_string(), r[0].metric(metric), None)
        }
        Err(e) => (String::new(), None, Some(e.to_string())),
    };
    AblationRow {
        mu,
        epsilon,
        gamma,
        repeat,
        seed,
        metric,
        value,
        error,
    }
}

/// Every combination for `repeats` seeds. Rows are ordered by combination,
/// then repeat.
pub fn ablation_sweep(
    spec: &ExperimentSpec,
    combos: &[(f64, f64, f64)],
    config: &MetaConfig,
    repeats: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let cells: Vec<((f64, f64, f64), usize)> = combos
        .iter()
        .flat_map(|&c| (0..repeats).map(move |r| (c, r)))
        .collect();
    Ok(pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(c, r)| ablation_cell(spec, c, config, base_seed + r as u64, r))
            .collect()
    }))
}

/// Combinations ranked by mean score (lower is better); failed rows are
/// skipped. Ties keep grid order.
pub fn rank_ablation(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut keys: Vec<(f64, f64, f64)> = Vec::new();
    for r in rows {
        let key = (r.mu, r.epsilon, r.gamma);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out: Vec<AblationSummary> = keys
        .into_iter()
        .filter_map(|(mu, epsilon, gamma)| {
            let ok: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| (r.mu, r.epsilon, r.gamma) == (mu, epsilon, gamma) && r.value.is_some())
                .collect();
            let vals: Vec<f64> = ok.iter().filter_map(|r| r.value).collect();
            if vals.is_empty() {
                return None;
            }
            let (mean, std) = mean_std(&vals);
            Some(AblationSummary {
                mu,
                epsilon,
                gamma,
                metric: ok[0].metric.clone(),
                mean,
                std,
                count: vals.len(),
            })
        })
        .collect();
    out.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    out
}
