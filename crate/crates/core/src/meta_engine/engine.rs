//! Inner-loop adaptation, the meta-objective and its gradient, training and
//! per-treatment estimation.

use super::adam::AdamState;
use super::config::MetaConfig;
use super::episode::{draw_rows, EpisodeBatch, TaskSampler};
use super::trace::{TraceRecord, TrainTrace};
use crate::datagen::ObservationalDataset;
use crate::error::{Error, Result};
use crate::nets::{
    extract_on_tape, forward_on_tape, init_params, l2_penalty, loss_on_tape, predict, ParamSet, ParamVars, TaskKind,
};
use crate::numkit::{median_bandwidth, mmd2_on_tape, Matrix, RngStream, Tape, Var};

/// Loss of a batch summed over its rows (`rows * mean`).
fn summed_loss(tape: &mut Tape, params: &ParamVars, kind: TaskKind, x: Var, y: Var) -> (Var, Var) {
    let (z, raw) = forward_on_tape(tape, params, x);
    let mean = loss_on_tape(tape, kind, raw, y);
    let rows = tape.shape(x).0 as f64;
    (z, tape.scale(mean, rows))
}

fn finite(tape: &Tape, v: Var, what: &str) -> Result<f64> {
    let s = tape.scalar(v);
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Runs `steps` SGD steps of size `alpha` on the support loss, starting from
/// `params`. `first_loss` may carry the already recorded loss at `params`.
/// With `create_graph` the updates stay differentiable with respect to
/// `params`; otherwise the gradients enter as constants.
#[allow(clippy::too_many_arguments)]
fn adapt_on_tape(
    tape: &mut Tape,
    params: &ParamVars,
    kind: TaskKind,
    x: Var,
    y: Var,
    alpha: f64,
    steps: usize,
    create_graph: bool,
    first_loss: Option<Var>,
) -> Result<ParamVars> {
    if alpha == 0.0 {
        return Ok(params.clone());
    }
    let mut cur = params.clone();
    let mut pending = first_loss;
    for _ in 0..steps {
        let loss = match pending.take() {
            Some(l) => l,
            None => summed_loss(tape, &cur, kind, x, y).1,
        };
        finite(tape, loss, "support loss during adaptation")?;
        let grads = tape.grad(loss, &cur.vars, create_graph)?;
        let next = cur
            .vars
            .iter()
            .zip(grads)
            .map(|(&w, g)| {
                let step = tape.scale(g, alpha);
                tape.sub(w, step)
            })
            .collect();
        cur = cur.with_vars(next);
    }
    Ok(cur)
}

fn batch_on_tape(tape: &mut Tape, x: &Matrix, y: &[f64]) -> Result<(Var, Var)> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("support set"));
    }
    if y.len() != x.rows() {
        return Err(crate::error::shape_err("support targets", x.rows(), y.len()));
    }
    let xv = tape.constant(x.clone());
    let yv = tape.constant(Matrix::column(y)?);
    Ok((xv, yv))
}

/// Parameters after `config.inner_steps` SGD steps on the summed support loss.
/// The input parameters are left untouched.
pub fn inner_adapt(
    params: &ParamSet,
    kind: TaskKind,
    support_x: &Matrix,
    support_y: &[f64],
    config: &MetaConfig,
) -> Result<ParamSet> {
    if support_x.cols() != params.input_dim() {
        return Err(crate::error::shape_err("support covariates", params.input_dim(), support_x.cols()));
    }
    if config.alpha == 0.0 {
        return Ok(params.clone());
    }
    let mut tape = Tape::new();
    let pv = params.to_tape(&mut tape);
    let (x, y) = batch_on_tape(&mut tape, support_x, support_y)?;
    let adapted = adapt_on_tape(&mut tape, &pv, kind, x, y, config.alpha, config.inner_steps, false, None)?;
    let out = params.from_tape(&tape, &adapted);
    if !out.tensors().iter().all(|t| t.is_finite()) {
        return Err(Error::NonFinite("adapted parameters".into()));
    }
    Ok(out)
}

/// Loss terms of one outer step, averaged over its episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaTerms {
    /// Support loss at the pre-adaptation parameters.
    pub l_sup: f64,
    /// Query loss at the adapted parameters.
    pub l_que: f64,
    /// Squared MMD between support and query embeddings.
    pub l_disc: f64,
    /// Weight penalty.
    pub l2: f64,
    /// Weighted objective including the penalty.
    pub l_obj: f64,
}

/// Records one episode and returns `(l_sup, l_que, l_disc, weighted sum)`.
fn record_episode(
    tape: &mut Tape,
    pv: &ParamVars,
    kind: TaskKind,
    ep: &EpisodeBatch,
    config: &MetaConfig,
) -> Result<[Var; 4]> {
    let (xs, ys) = batch_on_tape(tape, &ep.support_x, &ep.support_y)?;
    let (xq, yq) = batch_on_tape(tape, &ep.query_x, &ep.query_y)?;
    let (zs, l_sup) = summed_loss(tape, pv, kind, xs, ys);
    finite(tape, l_sup, "support loss")?;
    let adapted = adapt_on_tape(
        tape,
        pv,
        kind,
        xs,
        ys,
        config.alpha,
        config.inner_steps,
        !config.first_order,
        Some(l_sup),
    )?;
    let (_, l_que) = summed_loss(tape, &adapted, kind, xq, yq);
    finite(tape, l_que, "query loss")?;
    let zq = extract_on_tape(tape, pv, xq);
    let h = match config.mmd_bandwidth {
        Some(h) => h,
        None => median_bandwidth(tape.value(zs), tape.value(zq))?,
    };
    let l_disc = mmd2_on_tape(tape, zs, zq, h);
    finite(tape, l_disc, "discrepancy")?;

    let mut obj: Option<Var> = None;
    for (w, v) in [(config.mu, l_que), (config.epsilon, l_sup), (config.gamma, l_disc)] {
        if w != 0.0 {
            let term = tape.scale(v, w);
            obj = Some(match obj {
                None => term,
                Some(o) => tape.add(o, term),
            });
        }
    }
    let obj = obj.unwrap_or_else(|| tape.constant(Matrix::scalar(0.0)));
    Ok([l_sup, l_que, l_disc, obj])
}

/// Objective value and its gradient with respect to every parameter tensor,
/// in [`ParamSet::tensors`] order.
pub fn meta_gradient(
    params: &ParamSet,
    kind: TaskKind,
    episodes: &[EpisodeBatch],
    config: &MetaConfig,
) -> Result<(MetaTerms, Vec<Matrix>)> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("episode list"));
    }
    let b = episodes.len() as f64;
    let mut grads: Vec<Matrix> = params
        .tensors()
        .iter()
        .map(|t| Matrix::zeros(t.rows(), t.cols()))
        .collect();
    let mut terms = MetaTerms::default();
    for ep in episodes {
        let mut tape = Tape::new();
        let pv = params.to_tape(&mut tape);
        let [l_sup, l_que, l_disc, obj] = record_episode(&mut tape, &pv, kind, ep, config)?;
        terms.l_sup += tape.scalar(l_sup) / b;
        terms.l_que += tape.scalar(l_que) / b;
        terms.l_disc += tape.scalar(l_disc) / b;
        terms.l_obj += tape.scalar(obj) / b;
        if tape.is_tracked(obj) {
            let g = tape.grad(obj, &pv.vars, false)?;
            for (acc, gv) in grads.iter_mut().zip(g) {
                for (a, v) in acc.data_mut().iter_mut().zip(tape.value(gv).data()) {
                    *a += v / b;
                }
            }
        }
    }
    // The penalty does not depend on the episodes: add it once, analytically.
    terms.l2 = l2_penalty(params, config.weight_decay);
    terms.l_obj += terms.l2;
    if config.weight_decay != 0.0 {
        for (i, (acc, t)) in grads.iter_mut().zip(params.tensors()).enumerate() {
            if i % 2 == 0 {
                for (a, w) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += 2.0 * config.weight_decay * w;
                }
            }
        }
    }
    if !terms.l_obj.is_finite() {
        return Err(Error::NonFinite("meta objective".into()));
    }
    Ok((terms, grads))
}

/// Objective value only; see [`meta_gradient`].
pub fn meta_objective(
    params: &ParamSet,
    kind: TaskKind,
    episodes: &[EpisodeBatch],
    config: &MetaConfig,
) -> Result<MetaTerms> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("episode list"));
    }
    let b = episodes.len() as f64;
    let mut terms = MetaTerms::default();
    for ep in episodes {
        let mut tape = Tape::new();
        // Tracked so the inner loop can differentiate the support loss.
        let pv = params.to_tape(&mut tape);
        let [l_sup, l_que, l_disc, obj] = record_episode(&mut tape, &pv, kind, ep, config)?;
        terms.l_sup += tape.scalar(l_sup) / b;
        terms.l_que += tape.scalar(l_que) / b;
        terms.l_disc += tape.scalar(l_disc) / b;
        terms.l_obj += tape.scalar(obj) / b;
    }
    terms.l2 = l2_penalty(params, config.weight_decay);
    terms.l_obj += terms.l2;
    Ok(terms)
}

/// One Adam update of the meta-objective over `episodes`. Returns the terms
/// evaluated before the update.
pub fn outer_step(
    params: &mut ParamSet,
    kind: TaskKind,
    episodes: &[EpisodeBatch],
    config: &MetaConfig,
    opt: &mut AdamState,
) -> Result<MetaTerms> {
    let (terms, grads) = meta_gradient(params, kind, episodes, config)?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("meta-gradient of tensor {i}")));
    }
    opt.update(params, &grads);
    Ok(terms)
}

/// `(shift, scale)` applied to outcomes as `(y - shift) / scale`: training
/// mean and population standard deviation for regression when enabled, the
/// identity otherwise.
pub fn outcome_scaling(data: &ObservationalDataset, config: &MetaConfig) -> (f64, f64) {
    if !config.scale_outcomes || data.kind != TaskKind::Regression || data.n() == 0 {
        return (0.0, 1.0);
    }
    let n = data.n() as f64;
    let mean = data.y.iter().sum::<f64>() / n;
    let sd = (data.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

fn scaled_outcomes(data: &ObservationalDataset, config: &MetaConfig) -> Result<Option<ObservationalDataset>> {
    let (shift, scale) = outcome_scaling(data, config);
    if (shift, scale) == (0.0, 1.0) {
        return Ok(None);
    }
    let y = data.y.iter().map(|v| (v - shift) / scale).collect();
    ObservationalDataset::new(data.x.clone(), data.t.clone(), y, None, data.kind, data.k).map(Some)
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged { iteration, what },
        other => other,
    }
}

/// Meta-trains from fresh parameters drawn from the `init` substream of
/// `config.seed`; episodes come from the `episodes` substream.
pub fn train(data: &ObservationalDataset, target: usize, config: &MetaConfig) -> Result<(ParamSet, TrainTrace)> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let params = init_params(&config.architecture(data.p()), &mut root.substream("init"))?;
    train_from(data, target, config, params)
}

/// Meta-trains starting from `params`.
pub fn train_from(
    data: &ObservationalDataset,
    target: usize,
    config: &MetaConfig,
    mut params: ParamSet,
) -> Result<(ParamSet, TrainTrace)> {
    config.validate()?;
    if params.input_dim() != data.p() {
        return Err(crate::error::shape_err("initial parameters", data.p(), params.input_dim()));
    }
    let scaled = scaled_outcomes(data, config)?;
    let data = scaled.as_ref().unwrap_or(data);
    let sampler = TaskSampler::new(data, target)?;
    let mut rng = RngStream::new(config.seed).substream("episodes");
    let mut opt = AdamState::new(&params, config.beta);
    let mut trace = TrainTrace::default();
    let every = (config.max_iters / 10).max(1);
    for it in 0..config.max_iters {
        let episodes = (0..config.meta_batch)
            .map(|_| sampler.sample(config.per_task_k, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let terms = outer_step(&mut params, data.kind, &episodes, config, &mut opt).map_err(|e| diverged(it, e))?;
        trace.records.push(TraceRecord {
            iteration: it,
            l_sup: terms.l_sup,
            l_que: terms.l_que,
            l_disc: terms.l_disc,
            l_obj: terms.l_obj,
            source_ids: episodes.iter().map(|e| e.source_id).collect(),
        });
        if (it + 1) % every == 0 {
            log::debug!(
                "iter {}: l_obj {:.5} l_que {:.5} l_sup {:.5} mmd2 {:.5}",
                it + 1,
                terms.l_obj,
                terms.l_que,
                terms.l_sup,
                terms.l_disc
            );
        }
    }
    Ok((params, trace))
}

/// Predicted potential outcomes (`n_test x k`). Column `t` comes from the
/// meta-parameters adapted on `per_task_k` training rows of treatment `t`,
/// averaged over `estimate_draws` independent support draws. Adaptation
/// restarts from the meta-parameters for every treatment.
pub fn estimate_all(
    params: &ParamSet,
    train_data: &ObservationalDataset,
    x_test: &Matrix,
    config: &MetaConfig,
) -> Result<Matrix> {
    config.validate()?;
    if x_test.cols() != params.input_dim() {
        return Err(crate::error::shape_err("test covariates", params.input_dim(), x_test.cols()));
    }
    let groups = train_data.groups();
    let k = train_data.k;
    let n = x_test.rows();
    let mut rng = RngStream::new(config.seed).substream("estimate");
    let mut out = Matrix::zeros(n, k);
    let r = config.estimate_draws as f64;
    let (shift, scale) = outcome_scaling(train_data, config);
    for (t, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::EmptyGroup(t));
        }
        for _ in 0..config.estimate_draws {
            let pick = draw_rows(rows, config.per_task_k, &mut rng);
            let sx = train_data.x.select_rows(&pick);
            let sy: Vec<f64> = pick.iter().map(|&i| (train_data.y[i] - shift) / scale).collect();
            let adapted = inner_adapt(params, train_data.kind, &sx, &sy, config)?;
            let pred = predict(&adapted, train_data.kind, x_test)?;
            for i in 0..n {
                let cur = out.get(i, t);
                out.set(i, t, cur + (shift + scale * pred.get(i, 0)) / r);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, Architecture};

    fn small_config() -> MetaConfig {
        MetaConfig {
            extractor_widths: vec![4],
            head_widths: vec![4, 3],
            per_task_k: 4,
            meta_batch: 2,
            inner_steps: 2,
            max_iters: 5,
            alpha: 0.05,
            beta: 1e-2,
            ..MetaConfig::default()
        }
    }

    fn toy_data(n: usize, seed: u64) -> ObservationalDataset {
        let mut rng = RngStream::new(seed);
        let x = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let t: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y = (0..n).map(|i| x.get(i, 0) + t[i] as f64).collect();
        ObservationalDataset::new(x, t, y, None, TaskKind::Regression, 2).unwrap()
    }

    fn scalar_params(w: f64) -> ParamSet {
        let arch = Architecture {
            input_dim: 1,
            extractor_widths: vec![1],
            head_widths: vec![1],
            activation: Activation::Elu,
        };
        let mut p = init_params(&arch, &mut RngStream::new(0)).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p.theta[0].weight.set(0, 0, w);
        p
    }

    #[test]
    fn zero_alpha_leaves_params_unchanged() {
        let cfg = MetaConfig { alpha: 0.0, ..small_config() };
        let d = toy_data(20, 0);
        let p = init_params(&cfg.architecture(2), &mut RngStream::new(1)).unwrap();
        let a = inner_adapt(&p, TaskKind::Regression, &d.x.select_rows(&[0, 1]), &d.y[..2], &cfg).unwrap();
        assert_eq!(a, p);
    }

    #[test]
    fn single_weight_hand_step() {
        // Embedding is elu(0) = 0, so the head output is its bias; with a
        // zero bias the support loss reduces to the single-row (b - 3)^2.
        let p = scalar_params(0.0);
        let cfg = MetaConfig {
            alpha: 0.1,
            inner_steps: 1,
            ..MetaConfig::default()
        };
        let a = inner_adapt(&p, TaskKind::Regression, &Matrix::from_vec(1, 1, vec![0.0]).unwrap(), &[3.0], &cfg).unwrap();
        assert!((a.theta[0].bias.get(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_update() {
        let cfg = MetaConfig {
            mu: 0.0,
            epsilon: 0.0,
            gamma: 0.0,
            weight_decay: 0.0,
            ..small_config()
        };
        let d = toy_data(40, 2);
        let (p, _) = train(&d, 1, &cfg).unwrap();
        let init = init_params(&cfg.architecture(2), &mut RngStream::new(cfg.seed).substream("init")).unwrap();
        assert_eq!(p, init);
    }

    #[test]
    fn zero_iterations_return_init() {
        let cfg = MetaConfig { max_iters: 0, ..small_config() };
        let d = toy_data(40, 3);
        let (p, trace) = train(&d, 1, &cfg).unwrap();
        let init = init_params(&cfg.architecture(2), &mut RngStream::new(cfg.seed).substream("init")).unwrap();
        assert_eq!(p, init);
        assert!(trace.records.is_empty());
    }

    #[test]
    fn estimate_shape_and_no_adaptation() {
        let d = toy_data(40, 4);
        let cfg = small_config();
        let (p, _) = train(&d, 1, &cfg).unwrap();
        let est = estimate_all(&p, &d, &d.x, &cfg).unwrap();
        assert_eq!(est.shape(), (40, 2));
        let frozen = estimate_all(&p, &d, &d.x, &MetaConfig { alpha: 0.0, ..cfg }).unwrap();
        for i in 0..40 {
            assert_eq!(frozen.get(i, 0), frozen.get(i, 1));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = MetaConfig {
            alpha: 1e200,
            max_iters: 3,
            ..small_config()
        };
        let d = toy_data(40, 5);
        match train(&d, 1, &cfg) {
            Err(Error::Diverged { iteration, .. }) => assert!(iteration < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
