//! Subcommand implementations. Each returns the manifest of what it wrote.

use std::path::{Path, PathBuf};

use metaite_core::datagen::{load_csv, write_csv, CsvSchema, ObservationalDataset, Standardizer};
use metaite_core::eval_bench::{
    ablation_cell, aggregate, config_hash, fit_predict, prepare, prepare_from, rank_ablation, robustness_cell, score,
    weight_combinations, weight_grid, AblationRow, AggregateRow, ExperimentSpec, Method, MetricsReport, PreparedData,
    RobustnessRow,
};
use metaite_core::meta_engine::{estimate_all, train, Checkpoint, CheckpointMeta, MetaConfig};
use metaite_core::nets::TaskKind;
use metaite_core::numkit::{Matrix, RngStream};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{unix_millis, OutputSet, RunManifest};

pub const DATASET_META: &str = "dataset.json";
pub const CHECKPOINT: &str = "checkpoint.bin";

/// Description of a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: TaskKind,
    pub k: usize,
    pub seed: u64,
    pub target: usize,
    pub full_sizes: Vec<usize>,
    pub train_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    pub standardizer: Standardizer,
    pub config_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepMode {
    Robustness,
    Ablation,
}

fn csv_bytes(data: &ObservationalDataset) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_csv(data, &mut buf)?;
    Ok(buf)
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>, CliError> {
    let mut b = serde_json::to_vec_pretty(value)?;
    b.push(b'\n');
    Ok(b)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Training and test data: from `paths.data_dir` when set, otherwise
/// generated from the configured source and seed.
fn load_prepared(cfg: &RunConfig, spec: &ExperimentSpec) -> Result<PreparedData, CliError> {
    let Some(dir) = &cfg.paths.data_dir else {
        return Ok(prepare(spec, cfg.seed)?);
    };
    let meta: DatasetMeta = read_json(&dir.join(DATASET_META))?;
    let schema = CsvSchema {
        kind: meta.kind,
        k: Some(meta.k),
        standardize: false,
    };
    let train = load_csv(dir.join("train.csv"), &schema)?;
    let test = load_csv(dir.join("test.csv"), &schema)?;
    let target = cfg.data.target.unwrap_or(meta.target);
    if target >= meta.k {
        return Err(CliError::Config(format!("data.target {target} out of range for k={}", meta.k)));
    }
    Ok(PreparedData {
        train,
        test,
        standardizer: meta.standardizer,
        target,
    })
}

pub fn gen_data(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let started = unix_millis();
    let spec = cfg.experiment_spec();
    let data = spec.dataset.generate(&mut RngStream::new(cfg.seed).substream("data"))?;
    let prepared = prepare_from(&spec, data.clone(), cfg.seed)?;
    let meta = DatasetMeta {
        kind: data.kind,
        k: data.k,
        seed: cfg.seed,
        target: prepared.target,
        full_sizes: data.group_sizes(),
        train_sizes: prepared.train.group_sizes(),
        test_sizes: prepared.test.group_sizes(),
        standardizer: prepared.standardizer.clone(),
        config_hash: cfg.hash(),
    };
    let mut out = OutputSet::new(&cfg.out_dir)?;
    out.write("dataset.csv", &csv_bytes(&data)?)?;
    out.write("train.csv", &csv_bytes(&prepared.train)?)?;
    out.write("test.csv", &csv_bytes(&prepared.test)?)?;
    out.write(DATASET_META, &json_bytes(&meta)?)?;
    println!("group sizes: {:?} (n = {})", meta.full_sizes, data.n());
    println!("train sizes: {:?}, test sizes: {:?}, target group {}", meta.train_sizes, meta.test_sizes, meta.target);
    out.finish("gen-data", &cfg.hash(), cfg.seed, started)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let started = unix_millis();
    let spec = cfg.experiment_spec();
    let data = load_prepared(cfg, &spec)?;
    let (params, trace) = train(&data.train, data.target, &cfg.meta)?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            config: cfg.meta.clone(),
            target: data.target,
            kind: data.train.kind,
            k: data.train.k,
            standardizer: Some(data.standardizer.clone()),
        },
        params,
    };
    let mut trace_csv = Vec::new();
    trace.write_csv(&mut trace_csv)?;
    let mut out = OutputSet::new(&cfg.out_dir)?;
    out.write(CHECKPOINT, &ckpt.to_bytes()?)?;
    out.write("trace.csv", &trace_csv)?;
    if let Some(last) = trace.records.last() {
        println!(
            "trained {} iterations on target group {}: l_obj {:.6}, l_que {:.6}, mmd2 {:.6}",
            trace.len(),
            data.target,
            last.l_obj,
            last.l_que,
            last.l_disc
        );
    } else {
        println!("max_iters = 0: saved the initial parameters");
    }
    out.finish("train", &cfg.hash(), cfg.seed, started)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT))
}

fn load_checkpoint(cfg: &RunConfig, data: &PreparedData) -> Result<Checkpoint, CliError> {
    let path = checkpoint_path(cfg);
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist; run `train` first", path.display())));
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.meta.k != data.train.k || ckpt.params.input_dim() != data.train.p() {
        return Err(CliError::Runtime(format!(
            "checkpoint expects k={} and {} covariates, data has k={} and {}",
            ckpt.meta.k,
            ckpt.params.input_dim(),
            data.train.k,
            data.train.p()
        )));
    }
    Ok(ckpt)
}

fn predictions_csv(pred: &Matrix) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record((0..pred.cols()).map(|j| format!("y_hat_{j}")))?;
    for i in 0..pred.rows() {
        w.write_record(pred.row(i).iter().map(|v| v.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn estimate(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let started = unix_millis();
    let data = load_prepared(cfg, &cfg.experiment_spec())?;
    let ckpt = load_checkpoint(cfg, &data)?;
    let pred = estimate_all(&ckpt.params, &data.train, &data.test.x, &estimate_config(cfg, &ckpt))?;
    let mut out = OutputSet::new(&cfg.out_dir)?;
    out.write("predictions.csv", &predictions_csv(&pred)?)?;
    println!("wrote {} x {} potential-outcome estimates", pred.rows(), pred.cols());
    out.finish("estimate", &cfg.hash(), cfg.seed, started)
}

/// The checkpoint's training settings with the current estimation settings.
fn estimate_config(cfg: &RunConfig, ckpt: &Checkpoint) -> MetaConfig {
    MetaConfig {
        estimate_draws: cfg.meta.estimate_draws,
        seed: cfg.seed,
        ..ckpt.meta.config.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub reports: Vec<MetricsReport>,
    pub aggregate: Vec<AggregateRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics_csv(file: &MetricsFile) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row_type", "method", "repeat", "seed", "metric", "value", "std", "count"])?;
    for r in &file.reports {
        for m in ["sqrt_pehe", "ate_error", "rmse"] {
            if let Some(v) = r.metric(m) {
                w.write_record([
                    "run",
                    r.method.name(),
                    &r.repeat.to_string(),
                    &r.seed.to_string(),
                    m,
                    &v.to_string(),
                    "",
                    "1",
                ])?;
            }
        }
    }
    for a in &file.aggregate {
        w.write_record([
            "aggregate",
            a.method.name(),
            "",
            "",
            &a.metric,
            &a.mean.to_string(),
            &a.std.to_string(),
            &a.count.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn evaluate(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let started = unix_millis();
    let spec = cfg.experiment_spec();
    let hash = cfg.hash();
    let reports = if cfg.paths.checkpoint.is_some() || cfg.paths.data_dir.is_some() {
        evaluate_fixed(cfg, &spec, &hash)?
    } else {
        let mut all = Vec::new();
        for r in 0..cfg.repeats {
            let seed = cfg.seed + r as u64;
            all.extend(metaite_core::eval_bench::run_repeat(&spec, &cfg.methods, &cfg.meta, seed, r)?);
        }
        all
    };
    let file = MetricsFile {
        config_hash: hash.clone(),
        aggregate: aggregate(&reports),
        reports,
    };
    let mut out = OutputSet::new(&cfg.out_dir)?;
    out.write("metrics.json", &json_bytes(&file)?)?;
    out.write("metrics.csv", &metrics_csv(&file)?)?;
    for a in &file.aggregate {
        println!("{:<10} {:<10} {:.6} ± {:.6} (n={})", a.method.name(), a.metric, a.mean, a.std, a.count);
    }
    out.finish("evaluate", &hash, cfg.seed, started)
}

/// Scores methods on one fixed dataset; MetaITE comes from the checkpoint
/// when one is configured.
fn evaluate_fixed(cfg: &RunConfig, spec: &ExperimentSpec, hash: &str) -> Result<Vec<MetricsReport>, CliError> {
    let data = load_prepared(cfg, spec)?;
    let y_true = data.test.require_potential_outcomes("evaluation")?.clone();
    let ckpt = match &cfg.paths.checkpoint {
        Some(_) => Some(load_checkpoint(cfg, &data)?),
        None => None,
    };
    let meta = MetaConfig {
        seed: cfg.seed,
        ..cfg.meta.clone()
    };
    let mut reports = Vec::new();
    for &m in &cfg.methods {
        let (pred, jitter) = match (&ckpt, m) {
            (Some(c), Method::MetaIte) => (
                estimate_all(&c.params, &data.train, &data.test.x, &estimate_config(cfg, c))?,
                0.0,
            ),
            _ => {
                let o = fit_predict(m, &data, spec, &meta)?;
                (o.predictions, o.jitter)
            }
        };
        let (pehe, ate, rmse) = score(&y_true, &pred)?;
        reports.push(MetricsReport {
            method: m,
            repeat: 0,
            seed: cfg.seed,
            sqrt_pehe: pehe,
            ate_error: ate,
            rmse,
            n_test: data.test.n(),
            k: data.test.k,
            train_sizes: data.train.group_sizes(),
            target: data.target,
            ridge_jitter: jitter,
            config_hash: hash.to_string(),
        });
    }
    Ok(reports)
}

/// A cached sweep cell: its rows and the hash of everything they depend on.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CellFile<T> {
    cell_hash: String,
    rows: Vec<T>,
}

/// Loads cached cells whose hash matches and runs the rest on `jobs`
/// workers. Cells whose rows carry an error are reported but not cached, so
/// a rerun retries them. Rows come back in cell order.
fn run_cells<C, T>(
    out: &mut OutputSet,
    cells: &[C],
    jobs: usize,
    id: impl Fn(&C) -> String + Sync,
    hash: impl Fn(&C) -> String + Sync,
    failed: impl Fn(&T) -> bool + Sync,
    run: impl Fn(&C) -> Vec<T> + Sync,
) -> Result<(Vec<T>, usize), CliError>
where
    C: Sync,
    T: Serialize + DeserializeOwned + Send,
{
    let mut cached: Vec<Option<Vec<T>>> = Vec::with_capacity(cells.len());
    for c in cells {
        let path = out.root.join(id(c));
        let hit = path
            .is_file()
            .then(|| std::fs::read(&path).ok())
            .flatten()
            .and_then(|b| serde_json::from_slice::<CellFile<T>>(&b).ok().map(|f| (b, f)))
            .filter(|(_, f)| f.cell_hash == hash(c));
        match hit {
            Some((bytes, f)) => {
                out.record(&id(c), &bytes);
                cached.push(Some(f.rows));
            }
            None => cached.push(None),
        }
    }
    let pending: Vec<usize> = (0..cells.len()).filter(|&i| cached[i].is_none()).collect();
    let executed = pending.len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    let root = out.root.clone();
    let fresh: Vec<Result<(usize, Vec<T>, Option<Vec<u8>>), CliError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&i| {
                let c = &cells[i];
                let rows = run(c);
                if rows.iter().any(&failed) {
                    return Ok((i, rows, None));
                }
                let file = CellFile {
                    cell_hash: hash(c),
                    rows,
                };
                let bytes = json_bytes(&file)?;
                crate::manifest::write_atomic(&root.join(id(c)), &bytes)?;
                Ok((i, file.rows, Some(bytes)))
            })
            .collect()
    });
    for r in fresh {
        let (i, rows, bytes) = r?;
        if let Some(b) = bytes {
            out.record(&id(&cells[i]), &b);
        }
        cached[i] = Some(rows);
    }
    Ok((cached.into_iter().flatten().flatten().collect(), executed))
}

fn write_table<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Long-format robustness row: one metric per line.
#[derive(Serialize)]
struct RobustnessLong<'a> {
    fraction: f64,
    imbalance_ratio: f64,
    method: &'a str,
    repeat: usize,
    seed: u64,
    metric: &'a str,
    value: String,
    error: &'a str,
}

fn robustness_long(rows: &[RobustnessRow]) -> Vec<RobustnessLong<'_>> {
    let mut out = Vec::new();
    for r in rows {
        let line = |metric: &'static str, value: Option<f64>| RobustnessLong {
            fraction: r.fraction,
            imbalance_ratio: r.imbalance_ratio,
            method: r.method.name(),
            repeat: r.repeat,
            seed: r.seed,
            metric,
            value: opt(value),
            error: r.error.as_deref().unwrap_or(""),
        };
        if r.error.is_some() {
            out.push(line("", None));
            continue;
        }
        for (name, v) in [("sqrt_pehe", r.sqrt_pehe), ("ate_error", r.ate_error), ("rmse", r.rmse)] {
            if v.is_some() {
                out.push(line(name, v));
            }
        }
    }
    out
}

#[derive(Serialize)]
struct AblationFlat<'a> {
    mu: f64,
    epsilon: f64,
    gamma: f64,
    repeat: usize,
    seed: u64,
    metric: &'a str,
    value: String,
    error: &'a str,
}

pub fn sweep(cfg: &RunConfig, mode: SweepMode) -> Result<RunManifest, CliError> {
    let started = unix_millis();
    let spec = cfg.experiment_spec();
    let mut out = OutputSet::new(&cfg.out_dir)?;
    let repeats: Vec<usize> = (0..cfg.repeats).collect();
    let seed_of = |r: usize| cfg.seed + r as u64;
    match mode {
        SweepMode::Robustness => {
            let methods = cfg.sweep.methods.clone();
            let cells: Vec<(f64, usize)> = cfg
                .sweep
                .fractions
                .iter()
                .flat_map(|&f| repeats.iter().map(move |&r| (f, r)))
                .collect();
            let (rows, executed) = run_cells(
                &mut out,
                &cells,
                cfg.jobs,
                |&(f, r)| format!("cells/robustness/f{f}_r{r}.json"),
                |&(f, r)| config_hash(&(&spec, &cfg.meta, &methods, f, seed_of(r))),
                |row: &RobustnessRow| row.error.is_some(),
                |&(f, r)| robustness_cell(&spec, &methods, f, &cfg.meta, seed_of(r), r),
            )?;
            out.write("robustness.csv", &write_table(&robustness_long(&rows))?)?;
            out.write("robustness.json", &json_bytes(&rows)?)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("robustness sweep: {} cells ({executed} run, {} cached), {failed} failed rows", cells.len(), cells.len() - executed);
        }
        SweepMode::Ablation => {
            let values = match &cfg.sweep.grid_values {
                Some(v) => v.clone(),
                None => weight_grid(cfg.sweep.grid_step)?,
            };
            let combos = weight_combinations(&values)?;
            let cells: Vec<((f64, f64, f64), usize)> = combos
                .iter()
                .flat_map(|&c| repeats.iter().map(move |&r| (c, r)))
                .collect();
            let (rows, executed) = run_cells(
                &mut out,
                &cells,
                cfg.jobs,
                |&((m, e, g), r)| format!("cells/ablation/m{m}_e{e}_g{g}_r{r}.json"),
                |&(w, r)| config_hash(&(&spec, &cfg.meta, w, seed_of(r))),
                |row: &AblationRow| row.error.is_some(),
                |&(w, r)| vec![ablation_cell(&spec, w, &cfg.meta, seed_of(r), r)],
            )?;
            let flat: Vec<AblationFlat> = rows
                .iter()
                .map(|r| AblationFlat {
                    mu: r.mu,
                    epsilon: r.epsilon,
                    gamma: r.gamma,
                    repeat: r.repeat,
                    seed: r.seed,
                    metric: &r.metric,
                    value: opt(r.value),
                    error: r.error.as_deref().unwrap_or(""),
                })
                .collect();
            out.write("ablation.csv", &write_table(&flat)?)?;
            let ranked = rank_ablation(&rows);
            out.write("ablation_ranked.csv", &write_table(&ranked)?)?;
            let top: Vec<_> = ranked.iter().take(cfg.sweep.top).cloned().collect();
            out.write("ablation_top.json", &json_bytes(&top)?)?;
            println!("ablation sweep: {} cells ({executed} run, {} cached)", cells.len(), cells.len() - executed);
            for (i, s) in top.iter().enumerate() {
                println!(
                    "#{} mu={} epsilon={} gamma={}: {} {:.6} ± {:.6}",
                    i + 1,
                    s.mu,
                    s.epsilon,
                    s.gamma,
                    s.metric,
                    s.mean,
                    s.std
                );
            }
        }
    }
    let command = match mode {
        SweepMode::Robustness => "sweep-robustness",
        SweepMode::Ablation => "sweep-ablation",
    };
    out.finish(command, &cfg.hash(), cfg.seed, started)
}
