//! Episodic meta-training and per-treatment estimation.

mod adam;
mod checkpoint;
mod config;
mod engine;
mod episode;
mod trace;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{MetaConfig, MAX_INNER_STEPS};
pub use engine::{
    estimate_all, inner_adapt, meta_gradient, meta_objective, outer_step, outcome_scaling, train, train_from, MetaTerms,
};
pub use episode::{draw_rows, sample_episode, EpisodeBatch, TaskSampler};
pub use trace::{TraceRecord, TrainTrace};
