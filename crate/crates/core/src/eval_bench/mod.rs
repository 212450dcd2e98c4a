//! Metrics, classical baselines and experiment drivers.

mod baselines;
mod experiment;
mod metrics;
mod sweep;

pub use baselines::{fit_baseline, BaselineKind, BaselineOptions, FittedBaseline};
pub use experiment::{
    aggregate, config_hash, fit_predict, mean_std, prepare, prepare_from, primary_metric, run_experiment, run_repeat,
    score, smallest_group, AggregateRow, DatasetSpec, ExperimentResult, ExperimentSpec, MethodOutput, MetricsReport,
    Method, Preset, PreparedData,
};
pub use metrics::{ate_error, rmse_multi, sqrt_pehe};
pub use sweep::{
    ablation_cell, ablation_sweep, check_fractions, rank_ablation, robustness_cell, robustness_sweep,
    weight_combinations, weight_grid, AblationRow, AblationSummary, RobustnessRow,
};
