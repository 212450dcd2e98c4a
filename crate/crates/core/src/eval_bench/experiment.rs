//! The train/evaluate pipeline shared by single runs and sweeps.
//!
//! One repeat: generate data from the `data` substream, split it 80/20
//! stratified by treatment (`split`), subsample the training split to the
//! requested imbalance (`imbalance`), standardise with training statistics,
//! then fit every method on the training split and score it on the full
//! test split.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::baselines::{fit_baseline, BaselineKind, BaselineOptions};
use super::metrics::{ate_error, rmse_multi, sqrt_pehe};
use crate::datagen::{
    apply_imbalance, gen_news, gen_twins_binary, gen_twins_four, load_csv, split, CsvSchema, ImbalanceSpec,
    NewsConfig, ObservationalDataset, Standardizer, TwinsBinConfig, TwinsFourConfig,
};
use crate::error::{Error, Result};
use crate::meta_engine::{estimate_all, train, MetaConfig, TrainTrace};
use crate::nets::TaskKind;
use crate::numkit::{Matrix, RngStream};

/// Where the observational data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwinsBinary(TwinsBinConfig),
    TwinsFour(TwinsFourConfig),
    News(NewsConfig),
    Csv { path: PathBuf, kind: TaskKind, k: Option<usize> },
}

impl DatasetSpec {
    /// Number of treatments; a CSV source is read to find out.
    pub fn treatment_count(&self) -> Result<usize> {
        match self {
            Self::TwinsBinary(_) => Ok(2),
            Self::TwinsFour(_) => Ok(4),
            Self::News(c) => Ok(c.k),
            Self::Csv { k: Some(k), .. } => Ok(*k),
            Self::Csv { .. } => Ok(self.generate(&mut RngStream::new(0))?.k),
        }
    }

    pub fn generate(&self, rng: &mut RngStream) -> Result<ObservationalDataset> {
        match self {
            Self::TwinsBinary(c) => gen_twins_binary(c, rng),
            Self::TwinsFour(c) => gen_twins_four(c, rng),
            Self::News(c) => gen_news(c, rng),
            Self::Csv { path, kind, k } => load_csv(
                path,
                &CsvSchema {
                    kind: *kind,
                    k: *k,
                    standardize: false,
                },
            ),
        }
    }
}

/// The four benchmark configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    TwinsBin,
    #[serde(rename = "twins_4")]
    Twins4,
    #[serde(rename = "news_2")]
    News2,
    #[serde(rename = "news_4")]
    News4,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::TwinsBin, Preset::Twins4, Preset::News2, Preset::News4];

    pub fn dataset(self) -> DatasetSpec {
        match self {
            Self::TwinsBin => DatasetSpec::TwinsBinary(TwinsBinConfig::default()),
            Self::Twins4 => DatasetSpec::TwinsFour(TwinsFourConfig::default()),
            Self::News2 => DatasetSpec::News(NewsConfig::default()),
            Self::News4 => DatasetSpec::News(NewsConfig {
                k: 4,
                ..NewsConfig::default()
            }),
        }
    }

    /// Training-group sizes of the imbalanced benchmark.
    pub fn group_counts(self) -> Vec<usize> {
        match self {
            Self::TwinsBin => vec![4594, 80],
            Self::Twins4 => vec![6058, 160, 5926, 160],
            Self::News2 => vec![1634, 160],
            Self::News4 => vec![860, 80, 80, 80],
        }
    }

    /// Tuned `(mu, epsilon, gamma)`, where known.
    pub fn loss_weights(self) -> Option<(f64, f64, f64)> {
        match self {
            Self::News2 => Some((1.0, 0.9, 1.0)),
            Self::News4 => Some((1.0, 0.0, 1.0)),
            _ => None,
        }
    }

    pub fn spec(self) -> ExperimentSpec {
        ExperimentSpec {
            dataset: self.dataset(),
            imbalance: Some(ImbalanceSpec::Counts(self.group_counts())),
            ..ExperimentSpec::default()
        }
    }

    /// `config` with this preset's loss weights, if it has any.
    pub fn tune(self, config: &MetaConfig) -> MetaConfig {
        match self.loss_weights() {
            Some((m, e, g)) => config.with_weights(m, e, g),
            None => config.clone(),
        }
    }
}

/// Data preparation settings of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    /// Applied to the training split only.
    pub imbalance: Option<ImbalanceSpec>,
    pub train_fraction: f64,
    /// Target group for meta-training; the smallest training group if unset.
    pub target: Option<usize>,
    pub standardize: bool,
    pub baselines: BaselineOptions,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::TwinsBinary(TwinsBinConfig::default()),
            imbalance: None,
            train_fraction: 0.8,
            target: None,
            standardize: true,
            baselines: BaselineOptions::default(),
        }
    }
}

/// Methods that can be scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MetaIte,
    OlsLr1,
    OlsLr2,
    Knn,
    /// Returns the true potential outcomes; a harness sanity check.
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::MetaIte => "meta_ite",
            Self::OlsLr1 => "ols_lr1",
            Self::OlsLr2 => "ols_lr2",
            Self::Knn => "knn",
            Self::Oracle => "oracle",
        }
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::OlsLr1 => Some(BaselineKind::OlsLr1),
            Self::OlsLr2 => Some(BaselineKind::OlsLr2),
            Self::Knn => Some(BaselineKind::Knn),
            _ => None,
        }
    }
}

/// Training and test splits ready for fitting.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: ObservationalDataset,
    pub test: ObservationalDataset,
    pub standardizer: Standardizer,
    pub target: usize,
}

/// Index of the smallest group, lowest index on ties.
pub fn smallest_group(sizes: &[usize]) -> usize {
    sizes
        .iter()
        .enumerate()
        .min_by_key(|&(i, &s)| (s, i))
        .map_or(0, |(i, _)| i)
}

pub fn prepare(spec: &ExperimentSpec, seed: u64) -> Result<PreparedData> {
    let root = RngStream::new(seed);
    let data = spec.dataset.generate(&mut root.substream("data"))?;
    prepare_from(spec, data, seed)
}

/// Split, imbalance and standardisation of an already loaded dataset.
pub fn prepare_from(spec: &ExperimentSpec, data: ObservationalDataset, seed: u64) -> Result<PreparedData> {
    let root = RngStream::new(seed);
    let (mut train, mut test) = split(&data, spec.train_fraction, &mut root.substream("split"))?;
    if let Some(imb) = &spec.imbalance {
        train = apply_imbalance(&train, imb, &mut root.substream("imbalance"))?;
    }
    let standardizer = if spec.standardize {
        Standardizer::fit(&train.x)
    } else {
        Standardizer::identity(train.p())
    };
    train = train.with_covariates(standardizer.apply(&train.x)?)?;
    test = test.with_covariates(standardizer.apply(&test.x)?)?;
    let target = match spec.target {
        Some(t) if t >= train.k => {
            return Err(Error::InvalidArgument(format!("target {t} out of range for k={}", train.k)))
        }
        Some(t) => t,
        None => smallest_group(&train.group_sizes()),
    };
    Ok(PreparedData {
        train,
        test,
        standardizer,
        target,
    })
}

/// `(sqrt_pehe, ate_error)` for two treatments and `rmse` in every case.
pub fn score(y_true: &Matrix, y_hat: &Matrix) -> Result<(Option<f64>, Option<f64>, f64)> {
    let rmse = rmse_multi(y_true, y_hat)?;
    if y_true.cols() == 2 {
        Ok((Some(sqrt_pehe(y_true, y_hat)?), Some(ate_error(y_true, y_hat)?), rmse))
    } else {
        Ok((None, None, rmse))
    }
}

/// Name of the headline metric for a treatment count.
pub fn primary_metric(k: usize) -> &'static str {
    if k == 2 {
        "sqrt_pehe"
    } else {
        "rmse"
    }
}

/// Predictions of one method, with its training trace (MetaITE only) and the
/// ridge jitter used (baselines only).
pub struct MethodOutput {
    pub predictions: Matrix,
    pub trace: Option<TrainTrace>,
    pub jitter: f64,
}

pub fn fit_predict(method: Method, data: &PreparedData, spec: &ExperimentSpec, config: &MetaConfig) -> Result<MethodOutput> {
    if let Some(kind) = method.baseline() {
        let f = fit_baseline(kind, &data.train, &spec.baselines)?;
        return Ok(MethodOutput {
            predictions: f.predict(&data.test.x)?,
            trace: None,
            jitter: f.jitter,
        });
    }
    match method {
        Method::MetaIte => {
            let (params, trace) = train(&data.train, data.target, config)?;
            Ok(MethodOutput {
                predictions: estimate_all(&params, &data.train, &data.test.x, config)?,
                trace: Some(trace),
                jitter: 0.0,
            })
        }
        Method::Oracle => Ok(MethodOutput {
            predictions: data.test.require_potential_outcomes("the oracle method")?.clone(),
            trace: None,
            jitter: 0.0,
        }),
        _ => unreachable!("baselines handled above"),
    }
}

/// Scores of one method on one repeat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub repeat: usize,
    pub seed: u64,
    pub sqrt_pehe: Option<f64>,
    pub ate_error: Option<f64>,
    pub rmse: f64,
    pub n_test: usize,
    pub k: usize,
    pub train_sizes: Vec<usize>,
    pub target: usize,
    pub ridge_jitter: f64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "sqrt_pehe" => self.sqrt_pehe,
            "ate_error" => self.ate_error,
            "rmse" => Some(self.rmse),
            _ => None,
        }
    }
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn config_hash(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs every method on the data of one seed. `config.seed` is replaced by
/// `seed` so initialisation and episodes vary with the repeat.
pub fn run_repeat(
    spec: &ExperimentSpec,
    methods: &[Method],
    config: &MetaConfig,
    seed: u64,
    repeat: usize,
) -> Result<Vec<MetricsReport>> {
    let data = prepare(spec, seed)?;
    let y_true = data.test.require_potential_outcomes("scoring")?.clone();
    let cfg = MetaConfig {
        seed,
        ..config.clone()
    };
    let hash = config_hash(&(spec, config));
    methods
        .iter()
        .map(|&m| {
            let out = fit_predict(m, &data, spec, &cfg)?;
            let (pehe, ate, rmse) = score(&y_true, &out.predictions)?;
            Ok(MetricsReport {
                method: m,
                repeat,
                seed,
                sqrt_pehe: pehe,
                ate_error: ate,
                rmse,
                n_test: data.test.n(),
                k: data.test.k,
                train_sizes: data.train.group_sizes(),
                target: data.target,
                ridge_jitter: out.jitter,
                config_hash: hash.clone(),
            })
        })
        .collect()
}

/// Mean and sample standard deviation of one metric for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-method mean and standard deviation of every available metric, in
/// first-appearance order of the methods.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<AggregateRow> {
    let mut methods: Vec<Method> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let mut rows = Vec::new();
    for m in methods {
        for metric in ["sqrt_pehe", "ate_error", "rmse"] {
            let vals: Vec<f64> = reports
                .iter()
                .filter(|r| r.method == m)
                .filter_map(|r| r.metric(metric))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&vals);
            rows.push(AggregateRow {
                method: m,
                metric: metric.to_string(),
                mean,
                std,
                count: vals.len(),
            });
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub reports: Vec<MetricsReport>,
    pub aggregate: Vec<AggregateRow>,
}

/// `repeats` independent repeats with seeds `base_seed + r`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    methods: &[Method],
    config: &MetaConfig,
    repeats: usize,
    base_seed: u64,
) -> Result<ExperimentResult> {
    let mut reports = Vec::new();
    for r in 0..repeats {
        reports.extend(run_repeat(spec, methods, config, base_seed + r as u64, r)?);
    }
    let aggregate = aggregate(&reports);
    Ok(ExperimentResult { reports, aggregate })
}
