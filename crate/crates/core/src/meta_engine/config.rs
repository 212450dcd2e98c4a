use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Activation, Architecture};

/// Deepest inner loop the engine will unroll.
pub const MAX_INNER_STEPS: usize = 12;

/// Hyper-parameters of meta-training and estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (adaptation) SGD step size.
    pub alpha: f64,
    /// Meta (Adam) learning rate.
    pub beta: f64,
    /// Weight of the post-adaptation query loss.
    pub mu: f64,
    /// Weight of the pre-adaptation support loss.
    pub epsilon: f64,
    /// Weight of the embedding discrepancy (squared MMD).
    pub gamma: f64,
    pub inner_steps: usize,
    /// Rows in each support set and each query set.
    pub per_task_k: usize,
    /// Episodes averaged per outer step.
    pub meta_batch: usize,
    pub max_iters: usize,
    /// Treat inner-loop gradients as constants in the meta-gradient.
    pub first_order: bool,
    /// Coefficient of the squared-weight penalty.
    pub weight_decay: f64,
    pub extractor_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub activation: Activation,
    /// Fixed kernel bandwidth; the per-batch median heuristic when unset.
    pub mmd_bandwidth: Option<f64>,
    /// Standardise regression outcomes with training statistics while
    /// training and adapting; predictions are mapped back to the raw scale.
    pub scale_outcomes: bool,
    /// Independent support draws averaged per treatment at estimation time.
    pub estimate_draws: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1e-3,
            mu: 1.0,
            epsilon: 1.0,
            gamma: 1.0,
            inner_steps: 4,
            per_task_k: 8,
            meta_batch: 5,
            max_iters: 15000,
            first_order: false,
            weight_decay: 0.05,
            extractor_widths: vec![256, 128],
            head_widths: vec![128, 128, 64, 64],
            activation: Activation::Elu,
            mmd_bandwidth: None,
            scale_outcomes: true,
            estimate_draws: 1,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a non-negative finite number, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        for (name, v) in [("mu", self.mu), ("epsilon", self.epsilon), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.per_task_k < 1 {
            return bad("per_task_k must be at least 1".into());
        }
        if self.inner_steps < 1 || self.inner_steps > MAX_INNER_STEPS {
            return bad(format!("inner_steps must lie in 1..={MAX_INNER_STEPS}, got {}", self.inner_steps));
        }
        if self.meta_batch < 1 {
            return bad("meta_batch must be at least 1".into());
        }
        if self.estimate_draws < 1 {
            return bad("estimate_draws must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(h) = self.mmd_bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("mmd_bandwidth must be positive, got {h}"));
            }
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            extractor_widths: self.extractor_widths.clone(),
            head_widths: self.head_widths.clone(),
            activation: self.activation,
        }
    }

    /// Same settings with the three loss weights replaced.
    pub fn with_weights(&self, mu: f64, epsilon: f64, gamma: f64) -> Self {
        Self {
            mu,
            epsilon,
            gamma,
            ..self.clone()
        }
    }
}
