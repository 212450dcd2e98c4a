//! Library results checked against independent brute-force evaluations.

use metaite_core::datagen::{gen_news, NewsConfig, ObservationalDataset};
use metaite_core::eval_bench::{ate_error, rmse_multi, sqrt_pehe};
use metaite_core::meta_engine::{
    draw_rows, estimate_all, inner_adapt, sample_episode, train, MetaConfig, TaskSampler,
};
use metaite_core::nets::{self, init_params, Activation, Architecture, TaskKind};
use metaite_core::numkit::{gaussian_kernel, median_bandwidth, mmd2, Matrix, RngStream};

fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

fn mmd_double_loop(zs: &Matrix, zt: &Matrix, h: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (-d2 / (2.0 * h * h)).exp()
    };
    let (n, m) = (zs.rows(), zt.rows());
    let mut ss = 0.0;
    for i in 0..n {
        for j in 0..n {
            ss += k(zs.row(i), zs.row(j));
        }
    }
    let mut st = 0.0;
    for i in 0..n {
        for j in 0..m {
            st += k(zs.row(i), zt.row(j));
        }
    }
    let mut tt = 0.0;
    for i in 0..m {
        for j in 0..m {
            tt += k(zt.row(i), zt.row(j));
        }
    }
    ss / (n * n) as f64 - 2.0 * st / (n * m) as f64 + tt / (m * m) as f64
}

#[test]
fn mmd_matches_double_loop() {
    let mut rng = RngStream::new(0);
    for _ in 0..100 {
        let n = 1 + rng.index(64);
        let m = 1 + rng.index(64);
        let d = 1 + rng.index(6);
        let zs = random(n, d, &mut rng);
        let zt = random(m, d, &mut rng);
        let h = rng.uniform_range(0.3, 3.0);
        let v = mmd2(&zs, &zt, h).unwrap();
        assert!((v - mmd_double_loop(&zs, &zt, h)).abs() < 1e-10);
        assert!((v - mmd2(&zt, &zs, h).unwrap()).abs() < 1e-12);
        assert!(v >= -1e-12);
        assert!(mmd2(&zs, &zs, h).unwrap().abs() < 1e-12);
    }
}

#[test]
fn kernel_and_mmd_scalar_values() {
    let e = (-0.5f64).exp();
    assert!((gaussian_kernel(&[0.0], &[1.0], 1.0).unwrap() - e).abs() < 1e-15);
    let a = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
    let b = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    assert!((mmd2(&a, &b, 1.0).unwrap() - (2.0 - 2.0 * e)).abs() < 1e-12);
    let mut last = 0.0;
    for h in [1.0, 10.0, 100.0, 1000.0] {
        let v = gaussian_kernel(&[0.0, 1.0], &[2.0, -1.0], h).unwrap();
        assert!(v > last && v <= 1.0);
        last = v;
    }
}

#[test]
fn median_bandwidth_brute_force() {
    let mut rng = RngStream::new(1);
    for _ in 0..20 {
        let zs = random(2, 3, &mut rng);
        let zt = random(2, 3, &mut rng);
        let rows: Vec<&[f64]> = vec![zs.row(0), zs.row(1), zt.row(0), zt.row(1)];
        let mut d = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                d.push(rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let want = 0.5 * (d[2] + d[3]);
        assert!((median_bandwidth(&zs, &zt).unwrap() - want).abs() < 1e-12);
    }
}

fn pehe_oracle(y: &Matrix, h: &Matrix) -> f64 {
    let true_eff: Vec<f64> = (0..y.rows()).map(|i| y.row(i)[1] - y.row(i)[0]).collect();
    let est_eff: Vec<f64> = (0..h.rows()).map(|i| h.row(i)[1] - h.row(i)[0]).collect();
    let mse = true_eff.iter().zip(&est_eff).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / y.rows() as f64;
    mse.sqrt()
}

fn ate_oracle(y: &Matrix, h: &Matrix) -> f64 {
    let n = y.rows() as f64;
    let mean = |m: &Matrix, c: usize| m.col(c).iter().sum::<f64>() / n;
    ((mean(h, 1) - mean(h, 0)) - (mean(y, 1) - mean(y, 0))).abs()
}

fn rmse_oracle(y: &Matrix, h: &Matrix) -> f64 {
    let mut per_col = 0.0;
    for c in 0..y.cols() {
        per_col += y.col(c).iter().zip(h.col(c)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    (per_col / (y.rows() * y.cols()) as f64).sqrt()
}

#[test]
fn metrics_match_naive_formulas() {
    let mut rng = RngStream::new(2);
    for _ in 0..100 {
        let n = 1 + rng.index(1000);
        let y = random(n, 2, &mut rng);
        let h = random(n, 2, &mut rng);
        assert!((sqrt_pehe(&y, &h).unwrap() - pehe_oracle(&y, &h)).abs() < 1e-12);
        assert!((ate_error(&y, &h).unwrap() - ate_oracle(&y, &h)).abs() < 1e-12);
        assert!((rmse_multi(&y, &h).unwrap() - rmse_oracle(&y, &h)).abs() < 1e-12);
        let k = 2 + rng.index(4);
        let y = random(n, k, &mut rng);
        let h = random(n, k, &mut rng);
        assert!((rmse_multi(&y, &h).unwrap() - rmse_oracle(&y, &h)).abs() < 1e-12);
    }
}

#[test]
fn metric_examples() {
    let y = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
    let h = Matrix::zeros(2, 2);
    assert!((sqrt_pehe(&y, &h).unwrap() - 1.0).abs() < 1e-15);
    let y = Matrix::from_rows(&[vec![0.0, 0.5]]).unwrap();
    let h = Matrix::from_rows(&[vec![0.0, 0.2]]).unwrap();
    assert!((ate_error(&y, &h).unwrap() - 0.3).abs() < 1e-15);
    let y = Matrix::zeros(1, 2);
    let h = Matrix::filled(1, 2, 1.0);
    assert_eq!(rmse_multi(&y, &h).unwrap(), 1.0);
}

/// Dyadic grids keep every sum exact, so shifted metrics agree bit for bit.
#[test]
fn shift_invariance_is_exact() {
    let mut rng = RngStream::new(3);
    for _ in 0..100 {
        let n = 1 + rng.index(200);
        let dyadic = |rng: &mut RngStream| (rng.index(256) as f64 - 128.0) / 8.0;
        let y = Matrix::from_vec(n, 2, (0..2 * n).map(|_| dyadic(&mut rng)).collect()).unwrap();
        let h = Matrix::from_vec(n, 2, (0..2 * n).map(|_| dyadic(&mut rng)).collect()).unwrap();
        let c = dyadic(&mut rng);
        let shifted = h.map(|v| v + c);
        assert_eq!(sqrt_pehe(&y, &h).unwrap(), sqrt_pehe(&y, &shifted).unwrap());
        assert_eq!(ate_error(&y, &h).unwrap(), ate_error(&y, &shifted).unwrap());
        assert_eq!(rmse_multi(&y, &y.map(|v| v + c)).unwrap(), c.abs());
    }
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

/// Layer-by-layer forward pass written with plain loops.
fn naive_forward(params: &nets::ParamSet, x: &Matrix) -> Vec<f64> {
    let layers: Vec<&nets::Layer> = params.layers().collect();
    let last = layers.len() - 1;
    (0..x.rows())
        .map(|r| {
            let mut h = x.row(r).to_vec();
            for (li, l) in layers.iter().enumerate() {
                let mut out = vec![0.0; l.fan_out()];
                for (o, slot) in out.iter_mut().enumerate() {
                    let mut s = l.bias.get(0, o);
                    for (i, hv) in h.iter().enumerate() {
                        s += hv * l.weight.get(i, o);
                    }
                    *slot = if li == last { s } else { elu(s) };
                }
                h = out;
            }
            h[0]
        })
        .collect()
}

#[test]
fn forward_pass_matches_loop_oracle() {
    let arch = Architecture {
        input_dim: 5,
        extractor_widths: vec![7, 6],
        head_widths: vec![6, 4],
        activation: Activation::Elu,
    };
    let params = init_params(&arch, &mut RngStream::new(4)).unwrap();
    let x = random(9, 5, &mut RngStream::new(5));
    let want = naive_forward(&params, &x);
    let got = nets::predict(&params, TaskKind::Regression, &x).unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
    let probs = nets::predict(&params, TaskKind::Classification, &x).unwrap();
    for (p, w) in probs.data().iter().zip(&want) {
        assert!((p - 1.0 / (1.0 + (-w).exp())).abs() < 1e-12);
    }
}

#[test]
fn loss_examples() {
    let r = TaskKind::Regression;
    assert!((nets::inference_loss(r, &[1.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
    let c = TaskKind::Classification;
    assert!((nets::inference_loss(c, &[1.0], &[0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    let mut rng = RngStream::new(6);
    let y: Vec<f64> = (0..50).map(|_| rng.normal(0.0, 2.0)).collect();
    let yh: Vec<f64> = (0..50).map(|_| rng.normal(0.0, 2.0)).collect();
    let mut oracle = 0.0;
    for i in 0..50 {
        oracle += (y[i] - yh[i]) * (y[i] - yh[i]);
    }
    assert!((nets::inference_loss(r, &y, &yh).unwrap() - oracle / 50.0).abs() < 1e-12);
    let near: Vec<f64> = [1e-9, 1.0 - 1e-9].to_vec();
    assert!(nets::inference_loss(c, &[0.0, 1.0], &near).unwrap() < 1e-8);
}

fn grouped(sizes: &[usize]) -> ObservationalDataset {
    let t: Vec<usize> = sizes.iter().enumerate().flat_map(|(g, &n)| std::iter::repeat_n(g, n)).collect();
    let n = t.len();
    let x = Matrix::from_vec(n, 1, t.iter().map(|&g| g as f64).collect()).unwrap();
    let y = t.iter().map(|&g| g as f64).collect();
    ObservationalDataset::new(x, t, y, None, TaskKind::Regression, sizes.len()).unwrap()
}

#[test]
fn source_frequencies_are_uniform() {
    let d = grouped(&[30, 30, 30, 30]);
    let sampler = TaskSampler::new(&d, 2).unwrap();
    let mut rng = RngStream::new(7);
    let draws = 10000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let e = sampler.sample(2, &mut rng).unwrap();
        counts[e.source_id] += 1;
        assert!(e.support_x.data().iter().all(|v| *v == e.source_id as f64));
        assert!(e.query_x.data().iter().all(|v| *v == 2.0));
    }
    assert_eq!(counts[2], 0);
    let p = 1.0 / 3.0;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for g in [0, 1, 3] {
        assert!((counts[g] as f64 - draws as f64 * p).abs() < 3.0 * sd, "{counts:?}");
    }
    let small = grouped(&[3, 20]);
    let e = sample_episode(&small, 1, 8, &mut rng).unwrap();
    assert_eq!(e.support_x.rows(), 8);
}

fn toy_regression(n: usize, seed: u64) -> ObservationalDataset {
    let mut rng = RngStream::new(seed);
    let x = random(n, 2, &mut rng);
    let t: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let y = (0..n).map(|i| x.get(i, 0) - 0.5 * x.get(i, 1) + 2.0 * t[i] as f64).collect();
    ObservationalDataset::new(x, t, y, None, TaskKind::Regression, 2).unwrap()
}

fn tiny_config() -> MetaConfig {
    MetaConfig {
        extractor_widths: vec![8],
        head_widths: vec![8, 8],
        per_task_k: 8,
        meta_batch: 4,
        inner_steps: 2,
        alpha: 0.01,
        beta: 1e-2,
        max_iters: 500,
        weight_decay: 0.0,
        scale_outcomes: false,
        ..MetaConfig::default()
    }
}

#[test]
fn training_reduces_query_loss() {
    let d = toy_regression(200, 8);
    let (_, trace) = train(&d, 1, &tiny_config()).unwrap();
    assert_eq!(trace.len(), 500);
    let head: f64 = trace.records[..50].iter().map(|r| r.l_que).sum::<f64>() / 50.0;
    let tail = trace.tail_mean(50, |r| r.l_que).unwrap();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn training_is_deterministic() {
    let d = toy_regression(100, 9);
    let cfg = MetaConfig { max_iters: 20, ..tiny_config() };
    let (p1, t1) = train(&d, 1, &cfg).unwrap();
    let (p2, t2) = train(&d, 1, &cfg).unwrap();
    assert_eq!(p1.to_bytes(), p2.to_bytes());
    assert_eq!(t1, t2);
}

/// Several support draws average the single-draw predictions made from the
/// same random stream.
#[test]
fn estimate_draws_average_rerun_oracle() {
    let d = toy_regression(60, 10);
    let cfg = MetaConfig {
        max_iters: 5,
        estimate_draws: 3,
        seed: 11,
        ..tiny_config()
    };
    let (params, _) = train(&d, 1, &cfg).unwrap();
    let x_test = random(7, 2, &mut RngStream::new(12));
    let got = estimate_all(&params, &d, &x_test, &cfg).unwrap();

    let mut rng = RngStream::new(cfg.seed).substream("estimate");
    let mut want = Matrix::zeros(7, 2);
    for (t, rows) in d.groups().iter().enumerate() {
        for _ in 0..3 {
            let pick = draw_rows(rows, cfg.per_task_k, &mut rng);
            let sy: Vec<f64> = pick.iter().map(|&i| d.y[i]).collect();
            let adapted = inner_adapt(&params, d.kind, &d.x.select_rows(&pick), &sy, &cfg).unwrap();
            let pred = nets::predict(&adapted, d.kind, &x_test).unwrap();
            for i in 0..7 {
                want.set(i, t, want.get(i, t) + pred.get(i, 0) / 3.0);
            }
        }
    }
    assert!(got.max_abs_diff(&want) < 1e-12);
    let single = estimate_all(&params, &d, &x_test, &MetaConfig { estimate_draws: 1, ..cfg.clone() }).unwrap();
    assert!(single.max_abs_diff(&got) > 0.0);
}

#[test]
fn news_bias_concentrates_on_the_best_arm() {
    let kappas = [0.0, 2.0, 10.0];
    let mut means = Vec::new();
    for &kappa in &kappas {
        let cfg = NewsConfig {
            n: 1000,
            k: 4,
            kappa,
            ..NewsConfig::default()
        };
        let d = gen_news(&cfg, &mut RngStream::new(13)).unwrap();
        let y = d.y_all.as_ref().unwrap();
        let mut acc = 0.0;
        for i in 0..d.n() {
            let row = y.row(i);
            let probs = metaite_core::datagen::news::assignment_probabilities(kappa, row);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            acc += probs[best];
        }
        means.push(acc / d.n() as f64);
    }
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");

    let d = gen_news(
        &NewsConfig {
            n: 10000,
            k: 4,
            kappa: 0.0,
            ..NewsConfig::default()
        },
        &mut RngStream::new(14),
    )
    .unwrap();
    let sizes = d.group_sizes();
    let sd = (10000.0 * 0.25 * 0.75f64).sqrt();
    for s in sizes {
        assert!((s as f64 - 2500.0).abs() < 3.0 * sd);
    }
}
