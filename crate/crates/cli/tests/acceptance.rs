//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --release --test acceptance -- 4 6`.

mod common;

use std::time::Instant;

use metaite_core::datagen::{ImbalanceSpec, TwinsBinConfig};
use metaite_core::eval_bench::{
    ate_error, prepare, rmse_multi, robustness_cell, run_repeat, sqrt_pehe, weight_combinations, weight_grid,
    DatasetSpec, ExperimentSpec, Method, Preset,
};
use metaite_core::meta_engine::{
    inner_adapt, meta_gradient, meta_objective, outer_step, train, AdamState, EpisodeBatch, MetaConfig,
};
use metaite_core::nets::{self, init_params, Activation, Architecture, ParamSet, TaskKind};
use metaite_core::numkit::{mmd2, mmd2_on_tape, Matrix, RngStream, Tape};

/// Outer iterations for the end-to-end criteria; the full 15000 is far
/// beyond a single-core test budget.
const DESK_ITERS: usize = 1000;
const SEEDS: u64 = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn fd_gradient(ps: &ParamSet, f: impl Fn(&ParamSet) -> f64) -> Vec<f64> {
    const H: f64 = 1e-5;
    let sizes: Vec<usize> = ps.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (ti, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let mut plus = ps.clone();
            plus.tensors_mut()[ti].data_mut()[j] += H;
            let mut minus = ps.clone();
            minus.tensors_mut()[ti].data_mut()[j] -= H;
            out.push((f(&plus) - f(&minus)) / (2.0 * H));
        }
    }
    out
}

fn labels(kind: TaskKind, n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n)
        .map(|_| match kind {
            TaskKind::Regression => rng.normal(0.0, 1.0),
            TaskKind::Classification => f64::from(u8::from(rng.bernoulli(0.5))),
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let p = 3;
    let arch = Architecture {
        input_dim: p,
        extractor_widths: vec![8],
        head_widths: vec![8, 8],
        activation: Activation::Elu,
    };
    let base = MetaConfig {
        extractor_widths: vec![8],
        head_widths: vec![8, 8],
        alpha: 0.05,
        mu: 0.0,
        epsilon: 0.0,
        gamma: 0.0,
        weight_decay: 0.0,
        inner_steps: 1,
        mmd_bandwidth: Some(1.5),
        ..MetaConfig::default()
    };
    let mut first_order_worst: f64 = 0.0;
    let mut nested_worst: f64 = 0.0;
    for (i, kind) in [TaskKind::Regression, TaskKind::Classification].into_iter().enumerate() {
        let seed = 100 + i as u64;
        let ps = init_params(&arch, &mut RngStream::new(seed)).unwrap();
        let mut rng = RngStream::new(seed + 1);

        // Inference loss through the network.
        let x = random(7, p, &mut rng);
        let y = labels(kind, 7, &mut rng);
        let mut tape = Tape::new();
        let pv = ps.to_tape(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(Matrix::column(&y).unwrap());
        let (_, raw) = nets::forward_on_tape(&mut tape, &pv, xv);
        let loss = nets::loss_on_tape(&mut tape, kind, raw, yv);
        let g = tape.grad(loss, &pv.vars, false).unwrap();
        let analytic: Vec<f64> = g.iter().flat_map(|v| tape.value(*v).data().to_vec()).collect();
        let fd = fd_gradient(&ps, |q| {
            nets::inference_loss(kind, &y, nets::predict(q, kind, &x).unwrap().data()).unwrap()
        });
        first_order_worst = first_order_worst.max(rel_err(&analytic, &fd));

        let episodes: Vec<EpisodeBatch> = (0..2)
            .map(|_| EpisodeBatch {
                support_x: random(6, p, &mut rng),
                support_y: labels(kind, 6, &mut rng),
                query_x: random(6, p, &mut rng),
                query_y: labels(kind, 6, &mut rng),
                source_id: 0,
            })
            .collect();
        let check = |cfg: &MetaConfig| {
            let (_, g) = meta_gradient(&ps, kind, &episodes, cfg).unwrap();
            let flat: Vec<f64> = g.iter().flat_map(|m| m.data().iter().copied()).collect();
            let fd = fd_gradient(&ps, |q| meta_objective(q, kind, &episodes, cfg).unwrap().l_obj);
            rel_err(&flat, &fd)
        };
        // Support, discrepancy and penalty terms on their own.
        for cfg in [
            MetaConfig { epsilon: 1.0, ..base.clone() },
            MetaConfig { gamma: 1.0, ..base.clone() },
            MetaConfig { weight_decay: 0.05, ..base.clone() },
        ] {
            first_order_worst = first_order_worst.max(check(&cfg));
        }
        // Query loss and full objective through one and two inner steps.
        for steps in [1, 2] {
            nested_worst = nested_worst.max(check(&MetaConfig {
                mu: 1.0,
                inner_steps: steps,
                ..base.clone()
            }));
            nested_worst = nested_worst.max(check(&MetaConfig {
                mu: 1.0,
                epsilon: 0.7,
                gamma: 0.4,
                weight_decay: 0.05,
                inner_steps: steps,
                ..base.clone()
            }));
        }
    }

    // Discrepancy with respect to the embeddings themselves.
    let mut rng = RngStream::new(7);
    let zs = random(5, 3, &mut rng);
    let zt = random(4, 3, &mut rng);
    let mut tape = Tape::new();
    let a = tape.param(zs.clone());
    let b = tape.param(zt.clone());
    let v = mmd2_on_tape(&mut tape, a, b, 1.3);
    let g = tape.grad(v, &[a, b], false).unwrap();
    let analytic: Vec<f64> = g.iter().flat_map(|v| tape.value(*v).data().to_vec()).collect();
    let mut fd = Vec::new();
    for side in 0..2 {
        let m = if side == 0 { &zs } else { &zt };
        for j in 0..m.len() {
            let eval = |d: f64| {
                let mut c = m.clone();
                c.data_mut()[j] += d;
                if side == 0 {
                    mmd2(&c, &zt, 1.3).unwrap()
                } else {
                    mmd2(&zs, &c, 1.3).unwrap()
                }
            };
            fd.push((eval(1e-5) - eval(-1e-5)) / 2e-5);
        }
    }
    first_order_worst = first_order_worst.max(rel_err(&analytic, &fd));

    outcome(
        first_order_worst < 1e-4 && nested_worst < 1e-3,
        format!("worst loss-gradient rel err {first_order_worst:.2e} (< 1e-4), meta-gradient {nested_worst:.2e} (< 1e-3)"),
    )
}

// ---------------------------------------------------------------- 2

fn mmd_loop(zs: &Matrix, zt: &Matrix, h: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (2.0 * h * h)).exp();
    let mean = |a: &Matrix, b: &Matrix| {
        let mut s = 0.0;
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                s += k(a.row(i), b.row(j));
            }
        }
        s / (a.rows() * b.rows()) as f64
    };
    mean(zs, zs) - 2.0 * mean(zs, zt) + mean(zt, zt)
}

fn criterion_2() -> Outcome {
    let mut rng = RngStream::new(2);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..100 {
        let n = 1 + rng.index(64);
        let m = 1 + rng.index(64);
        let d = 1 + rng.index(8);
        let zs = random(n, d, &mut rng);
        let zt = random(m, d, &mut rng);
        let h = rng.uniform_range(0.25, 4.0);
        let v = mmd2(&zs, &zt, h).unwrap();
        worst = worst.max((v - mmd_loop(&zs, &zt, h)).abs());
        ok &= mmd2(&zs, &zs, h).unwrap().abs() < 1e-12;
        ok &= (v - mmd2(&zt, &zs, h).unwrap()).abs() < 1e-12;
    }
    outcome(ok && worst < 1e-10, format!("max |vectorised - double loop| {worst:.2e}; zero on identical inputs and symmetric: {ok}"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = RngStream::new(3);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..100 {
        let n = 1 + rng.index(1000);
        let y = random(n, 2, &mut rng);
        let h = random(n, 2, &mut rng);
        let effects = |m: &Matrix| (0..n).map(|i| m.get(i, 1) - m.get(i, 0)).collect::<Vec<_>>();
        let (te, he) = (effects(&y), effects(&h));
        let pehe = (te.iter().zip(&he).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
        let ate = (te.iter().sum::<f64>() / n as f64 - he.iter().sum::<f64>() / n as f64).abs();
        let rmse = (y.data().iter().zip(h.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2 * n) as f64).sqrt();
        worst = worst
            .max((sqrt_pehe(&y, &h).unwrap() - pehe).abs())
            .max((ate_error(&y, &h).unwrap() - ate).abs())
            .max((rmse_multi(&y, &h).unwrap() - rmse).abs());

        // Dyadic values make the shifted sums exact.
        let dy = |rng: &mut RngStream| (rng.index(512) as f64 - 256.0) / 16.0;
        let y = Matrix::from_vec(n, 2, (0..2 * n).map(|_| dy(&mut rng)).collect()).unwrap();
        let h = Matrix::from_vec(n, 2, (0..2 * n).map(|_| dy(&mut rng)).collect()).unwrap();
        let c = dy(&mut rng);
        let hs = h.map(|v| v + c);
        exact &= sqrt_pehe(&y, &h).unwrap() == sqrt_pehe(&y, &hs).unwrap();
        exact &= ate_error(&y, &h).unwrap() == ate_error(&y, &hs).unwrap();
    }
    outcome(worst < 1e-12 && exact, format!("max |metric - naive| {worst:.2e}; shift invariance exact: {exact}"))
}

// ---------------------------------------------------------------- 4

struct Sinusoid {
    amplitude: f64,
    phase: f64,
}

impl Sinusoid {
    fn draw(rng: &mut RngStream) -> Self {
        Self {
            amplitude: rng.uniform_range(0.1, 5.0),
            phase: rng.uniform_range(0.0, std::f64::consts::PI),
        }
    }

    fn sample(&self, k: usize, rng: &mut RngStream) -> (Matrix, Vec<f64>) {
        let x: Vec<f64> = (0..k).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
        let y = x.iter().map(|v| self.amplitude * (v - self.phase).sin()).collect();
        (Matrix::from_vec(k, 1, x).unwrap(), y)
    }
}

fn criterion_4() -> Outcome {
    let k = 10;
    // The support loss is summed over the K rows, so alpha = 1e-3 here is a
    // step of 1e-2 on the mean loss.
    let cfg = MetaConfig {
        extractor_widths: vec![40],
        head_widths: vec![40, 40],
        alpha: 1e-3,
        beta: 1e-3,
        mu: 1.0,
        epsilon: 0.0,
        gamma: 0.0,
        weight_decay: 0.0,
        inner_steps: 4,
        per_task_k: k,
        meta_batch: 5,
        ..MetaConfig::default()
    };
    let arch = Architecture {
        input_dim: 1,
        extractor_widths: cfg.extractor_widths.clone(),
        head_widths: cfg.head_widths.clone(),
        activation: Activation::Elu,
    };
    let kind = TaskKind::Regression;
    let mut params = init_params(&arch, &mut RngStream::new(40)).unwrap();
    let mut opt = AdamState::new(&params, cfg.beta);
    let mut rng = RngStream::new(41);
    for _ in 0..2000 {
        let episodes: Vec<EpisodeBatch> = (0..cfg.meta_batch)
            .map(|_| {
                let task = Sinusoid::draw(&mut rng);
                let (support_x, support_y) = task.sample(k, &mut rng);
                let (query_x, query_y) = task.sample(k, &mut rng);
                EpisodeBatch {
                    support_x,
                    support_y,
                    query_x,
                    query_y,
                    source_id: 0,
                }
            })
            .collect();
        if let Err(e) = outer_step(&mut params, kind, &episodes, &cfg, &mut opt) {
            return outcome(false, format!("meta-training failed: {e}"));
        }
    }

    let mut held_out = RngStream::new(42);
    let mut improved = 0;
    let (mut pre_sum, mut post_sum) = (0.0, 0.0);
    for _ in 0..100 {
        let task = Sinusoid::draw(&mut held_out);
        let (x, y) = task.sample(k, &mut held_out);
        let pre = nets::inference_loss(kind, &y, nets::predict(&params, kind, &x).unwrap().data()).unwrap();
        let adapted = inner_adapt(&params, kind, &x, &y, &cfg).unwrap();
        let post = nets::inference_loss(kind, &y, nets::predict(&adapted, kind, &x).unwrap().data()).unwrap();
        improved += usize::from(post < pre);
        pre_sum += pre;
        post_sum += post;
    }
    outcome(
        improved >= 90,
        format!(
            "{improved}/100 held-out tasks improve after adaptation (mean support MSE {:.4} -> {:.4})",
            pre_sum / 100.0,
            post_sum / 100.0
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let preset = Preset::TwinsBin;
    let spec = preset.spec();
    let cfg = preset.tune(&MetaConfig {
        max_iters: DESK_ITERS,
        ..MetaConfig::default()
    });
    let (mut meta, mut lr2) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let reports = match run_repeat(&spec, &[Method::MetaIte, Method::OlsLr2], &cfg, seed, seed as usize) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        meta.push(reports[0].sqrt_pehe.unwrap());
        lr2.push(reports[1].sqrt_pehe.unwrap());
    }
    let m = meta.iter().sum::<f64>() / meta.len() as f64;
    let l = lr2.iter().sum::<f64>() / lr2.len() as f64;
    outcome(
        m <= l && (0.26..=0.36).contains(&m),
        format!("mean sqrt_pehe over {SEEDS} seeds: meta_ite {m:.4}, ols_lr2 {l:.4} (band [0.26, 0.36])"),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let preset = Preset::News4;
    let spec = preset.spec();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let data = match prepare(&spec, seed) {
            Ok(d) => d,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let mut tail = [0.0; 2];
        for (slot, gamma) in [1.0, 0.0].into_iter().enumerate() {
            let cfg = MetaConfig {
                gamma,
                max_iters: DESK_ITERS,
                seed,
                ..preset.tune(&MetaConfig::default())
            };
            match train(&data.train, data.target, &cfg) {
                Ok((_, trace)) => tail[slot] = trace.tail_mean(1000, |r| r.l_disc).unwrap(),
                Err(e) => return outcome(false, format!("seed {seed}, gamma {gamma}: {e}")),
            }
        }
        wins += usize::from(tail[0] < tail[1]);
        pairs.push(format!("{:.4}/{:.4}", tail[0], tail[1]));
    }
    outcome(
        wins >= 8,
        format!("MMD^2 lower with gamma=1 in {wins}/{SEEDS} seeds (gamma=1/gamma=0: {})", pairs.join(" ")),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let spec = ExperimentSpec {
        dataset: DatasetSpec::TwinsBinary(TwinsBinConfig::default()),
        imbalance: None,
        ..ExperimentSpec::default()
    };
    let cfg = MetaConfig {
        max_iters: DESK_ITERS,
        ..MetaConfig::default()
    };
    let methods = [Method::MetaIte, Method::OlsLr2];
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in 0..SEEDS {
        let mut at = Vec::new();
        for fraction in [1.0, 0.05] {
            let rows = robustness_cell(&spec, &methods, fraction, &cfg, seed, seed as usize);
            if let Some(e) = rows.iter().find_map(|r| r.error.clone()) {
                return outcome(false, format!("seed {seed}, fraction {fraction}: {e}"));
            }
            at.push((rows[0].sqrt_pehe.unwrap(), rows[1].sqrt_pehe.unwrap()));
        }
        let meta_change = (at[1].0 - at[0].0).abs() / at[0].0;
        let lr2_change = (at[1].1 - at[0].1) / at[0].1;
        good += usize::from(meta_change < 0.2 && lr2_change > meta_change);
        notes.push(format!("{:+.1}%/{:+.1}%", 100.0 * (at[1].0 - at[0].0) / at[0].0, 100.0 * lr2_change));
    }
    outcome(
        good >= 8,
        format!(
            "trend holds in {good}/{SEEDS} seeds from ratio 1 to 20 (meta_ite/ols_lr2 change: {})",
            notes.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let four_arm = r#"
seed = 5
methods = ["meta_ite", "knn", "ols_lr1"]
repeats = 2
[data.dataset]
source = "news"
n = 300
k = 4
[meta]
max_iters = 5
extractor_widths = [8]
head_widths = [8, 8]
[sweep]
fractions = [1.0, 0.5]
methods = ["meta_ite", "knn"]
grid_values = [0.0, 1.0]
"#;
    for (name, text) in [("twins", common::SMALL_CONFIG), ("news", four_arm)] {
        if let Some(diff) = common::determinism_mismatch(text) {
            return outcome(false, format!("{name}: {diff}"));
        }
    }
    outcome(
        true,
        format!("{} commands rerun on two configurations: outputs byte-identical, manifests equal without timestamps", common::COMMANDS.len()),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let c = MetaConfig::default();
    let checks = [
        ("meta_batch", c.meta_batch == 5),
        ("per_task_k", c.per_task_k == 8),
        ("inner_steps", c.inner_steps == 4),
        ("extractor_widths", c.extractor_widths == [256, 128]),
        ("head_widths", c.head_widths == [128, 128, 64, 64]),
        ("alpha", c.alpha == 1e-3),
        ("beta", c.beta == 1e-3),
        ("weight_decay", c.weight_decay == 0.05),
        ("max_iters", c.max_iters == 15000),
        ("news_4 weights", Preset::News4.loss_weights() == Some((1.0, 0.0, 1.0))),
        (
            "twins_bin imbalance",
            Preset::TwinsBin.spec().imbalance == Some(ImbalanceSpec::Counts(vec![4594, 80])),
        ),
        (
            "ablation grid",
            weight_combinations(&weight_grid(0.1).unwrap()).map(|v| v.len()).ok() == Some(1331),
        ),
    ];
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} default settings match", checks.len())
        } else {
            format!("mismatched: {}", bad.join(", "))
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", criterion_1),
        ("MMD oracle equivalence", criterion_2),
        ("metric oracles", criterion_3),
        ("meta-learning sanity on sinusoids", criterion_4),
        ("Twins_bin end to end", criterion_5),
        ("discrepancy term effect on News_4", criterion_6),
        ("robustness trend on Twins_bin", criterion_7),
        ("determinism", criterion_8),
        ("default-config fidelity", criterion_9),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{verdict} criterion {id} ({name}): {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
