//! Run configuration: a TOML file, `METAITE_*` environment overrides, then
//! command-line flags, in increasing precedence.
//!
//! Environment keys map onto the document by lower-casing and splitting on
//! `__`: `METAITE_META__MAX_ITERS=50` sets `meta.max_iters`. Values are read
//! as TOML (`50`, `true`, `[0.5, 1.0]`) and fall back to plain strings.

use std::path::{Path, PathBuf};

use metaite_core::datagen::ImbalanceSpec;
use metaite_core::eval_bench::{config_hash, BaselineOptions, DatasetSpec, ExperimentSpec, Method, Preset};
use metaite_core::meta_engine::MetaConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "METAITE_";

/// Imbalance applied to the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceSetting {
    /// Keep every training row, overriding a preset.
    None,
    Counts(Vec<usize>),
    Fractions(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// One of the benchmark presets; supplies generator, imbalance and loss
    /// weights unless they are given explicitly.
    pub preset: Option<Preset>,
    /// Explicit data source (`source = "twins_binary" | "twins_four" | "news" | "csv"`).
    pub dataset: Option<DatasetSpec>,
    pub imbalance: Option<ImbalanceSetting>,
    pub train_fraction: Option<f64>,
    pub target: Option<usize>,
    pub standardize: Option<bool>,
    pub knn_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Treated-group fractions of the robustness sweep.
    pub fractions: Vec<f64>,
    /// Methods of the robustness sweep.
    pub methods: Vec<Method>,
    /// Loss-weight values; every `(mu, epsilon, gamma)` combination is run.
    pub grid_values: Option<Vec<f64>>,
    /// Spacing of the default `0..=1` grid when `grid_values` is unset.
    pub grid_step: f64,
    /// Combinations listed in the ranked summary.
    pub top: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            fractions: vec![1.0, 0.5, 0.2, 0.1, 0.05],
            methods: vec![Method::MetaIte, Method::OlsLr1, Method::OlsLr2, Method::Knn],
            grid_values: None,
            grid_step: 0.1,
            top: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Output directory of an earlier `gen-data` run to use instead of
    /// generating data in memory.
    pub data_dir: Option<PathBuf>,
    /// Checkpoint to estimate or evaluate; `<out_dir>/checkpoint.bin` if unset.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: usize,
    /// Repeats of `evaluate` and sweeps, with seeds `seed + r`.
    pub repeats: usize,
    pub methods: Vec<Method>,
    pub data: DataSection,
    pub meta: MetaConfig,
    pub sweep: SweepSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("metaite-out"),
            jobs: 1,
            repeats: 1,
            methods: vec![Method::MetaIte, Method::OlsLr1, Method::OlsLr2, Method::Knn],
            data: DataSection::default(),
            meta: MetaConfig::default(),
            sweep: SweepSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Flag values that override the file and environment.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
}

fn parse_env_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `METAITE_*` variables from `vars` to `table`.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != "METAITE_LOG")
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("malformed override variable {key}")));
        }
        let mut cur = &mut *table;
        for seg in &path[..path.len() - 1] {
            let entry = cur
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = match entry {
                toml::Value::Table(t) => t,
                _ => return Err(CliError::Config(format!("{key}: `{seg}` is not a table"))),
            };
        }
        cur.insert(path[path.len() - 1].clone(), parse_env_value(&raw));
    }
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or the defaults), then environment overrides from `env`,
    /// then `overrides`. Validation happens here so no work starts on a bad
    /// config.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &Overrides,
    ) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_env(&mut table, env)?;
        Self::from_table(table, overrides)
    }

    pub fn from_table(table: toml::Table, overrides: &Overrides) -> Result<Self, CliError> {
        let weights_given = table
            .get("meta")
            .and_then(toml::Value::as_table)
            .is_some_and(|m| ["mu", "epsilon", "gamma"].iter().any(|k| m.contains_key(*k)));
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
        if let Some(p) = cfg.data.preset {
            if !weights_given {
                cfg.meta = p.tune(&cfg.meta);
            }
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out_dir {
            cfg.out_dir = o.clone();
        }
        if let Some(j) = overrides.jobs {
            cfg.jobs = j;
        }
        cfg.meta.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.meta.validate().map_err(|e| CliError::Config(format!("meta: {e}")))?;
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        if let Some(f) = self.data.train_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Config(format!("data.train_fraction must lie in (0, 1), got {f}")));
            }
        }
        if self.data.knn_k == Some(0) {
            return Err(CliError::Config("data.knn_k must be positive".into()));
        }
        metaite_core::eval_bench::check_fractions(&self.sweep.fractions)
            .map_err(|e| CliError::Config(format!("sweep.fractions: {e}")))?;
        if let Some(v) = &self.sweep.grid_values {
            metaite_core::eval_bench::weight_combinations(v)
                .map_err(|e| CliError::Config(format!("sweep.grid_values: {e}")))?;
        } else {
            metaite_core::eval_bench::weight_grid(self.sweep.grid_step)
                .map_err(|e| CliError::Config(format!("sweep.grid_step: {e}")))?;
        }
        if let Some(DatasetSpec::Csv { path, .. }) = &self.data.dataset {
            if !path.is_file() {
                return Err(CliError::Config(format!("dataset file {} does not exist", path.display())));
            }
        }
        if let Some(d) = &self.paths.data_dir {
            if !d.join(crate::commands::DATASET_META).is_file() {
                return Err(CliError::Config(format!(
                    "data_dir {} does not hold a generated dataset ({} missing)",
                    d.display(),
                    crate::commands::DATASET_META
                )));
            }
        }
        Ok(())
    }

    /// Data preparation settings after applying the preset.
    pub fn experiment_spec(&self) -> ExperimentSpec {
        let d = &self.data;
        let mut spec = d.preset.map(Preset::spec).unwrap_or_default();
        if let Some(ds) = &d.dataset {
            spec.dataset = ds.clone();
        }
        match &d.imbalance {
            Some(ImbalanceSetting::None) => spec.imbalance = None,
            Some(ImbalanceSetting::Counts(c)) => spec.imbalance = Some(ImbalanceSpec::Counts(c.clone())),
            Some(ImbalanceSetting::Fractions(f)) => spec.imbalance = Some(ImbalanceSpec::Fractions(f.clone())),
            None => {}
        }
        if let Some(f) = d.train_fraction {
            spec.train_fraction = f;
        }
        spec.target = d.target.or(spec.target);
        if let Some(s) = d.standardize {
            spec.standardize = s;
        }
        if let Some(k) = d.knn_k {
            spec.baselines = BaselineOptions { knn_k: k };
        }
        spec
    }

    /// Hash of the resolved configuration, excluding settings that cannot
    /// change results (output location and worker count).
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            out_dir: PathBuf::new(),
            jobs: 1,
            ..self.clone()
        };
        config_hash(&canonical)
    }
}
