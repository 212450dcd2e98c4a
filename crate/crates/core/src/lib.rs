//! Meta-learned individual treatment effect estimation for multiple
//! imbalanced treatments.
//!
//! Treatment groups are treated as domains: a shared feature extractor and
//! inference head are meta-trained on episodes whose support set comes from
//! a source treatment group and whose query set comes from the (small)
//! target group, with an MMD penalty aligning the two embeddings. At
//! estimation time the meta-parameters are adapted on a few samples of each
//! treatment in turn to produce one potential-outcome column per treatment.
//!
//! Modules:
//! - [`numkit`]: matrices, RNG streams, nested reverse-mode AD, kernels.
//! - [`nets`]: extractor/head networks, losses, parameter sets.
//! - [`meta_engine`]: episodic training and per-treatment estimation.
//! - [`datagen`]: Twins- and News-style simulators, imbalance, splits, CSV.
//! - [`eval_bench`]: metrics, classical baselines, experiment drivers.

pub mod datagen;
pub mod error;
pub mod eval_bench;
pub mod meta_engine;
pub mod nets;
pub mod numkit;

pub use error::{Error, Result};
