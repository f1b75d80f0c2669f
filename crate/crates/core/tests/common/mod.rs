//! Property checks shared by the `properties` and `acceptance` targets. Each check returns
//! a one-line detail string, `Err` when the property is violated.

#![allow(dead_code)]

use std::path::Path;

use intact_core::balancing::{entropic_ot, BalanceConfig};
use intact_core::estimation::{estimate_effects, EffectMode};
use intact_core::experiments::{run_synthetic_suite, NoisePoint, RunRecord, SynthSweep, RUN_RECORD_SCHEMA};
use intact_core::gaussian::{gaussian_kl, DiagGaussian, LN_2PI};
use intact_core::model::{draw_noise, Decoder, ElboTerms, Objective};
use intact_core::nn::{Activation, Linear};
use intact_core::synthetic::{make_dgp, sample_dgp};
use intact_core::training::grad_check;
use intact_core::{Dataset, ExperimentConfig, ExperimentKind, ModelConfig, ModelParams, OutcomeFamily, Structure};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Gauss–Hermite nodes and weights for `int exp(-x^2) g(x) dx`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j + 1) as f64).sqrt() * p2 - (j as f64 / (j + 1) as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// KL against the cross-entropy minus entropy route, over `pairs` random pairs.
pub fn kl_closed_form(pairs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut min_kl = f64::INFINITY;
    for _ in 0..pairs {
        let d = rng.random_range(1..=4);
        let draw = |rng: &mut ChaCha8Rng| -> (Array1<f64>, Array1<f64>) {
            (
                Array1::from_shape_fn(d, |_| rng.random_range(-3.0..3.0)),
                Array1::from_shape_fn(d, |_| rng.random_range(-3.0f64..3.0).exp()),
            )
        };
        let (qm, qv) = draw(&mut rng);
        let (pm, pv) = draw(&mut rng);
        let q = DiagGaussian::new(qm.clone(), qv.clone()).map_err(|e| e.to_string())?;
        let p = DiagGaussian::new(pm.clone(), pv.clone()).map_err(|e| e.to_string())?;
        let kl = gaussian_kl(&q, &p).map_err(|e| e.to_string())?;
        let mut cross = 0.0;
        let mut ent = 0.0;
        for j in 0..d {
            cross += 0.5 * (LN_2PI + pv[j].ln() + (qv[j] + (qm[j] - pm[j]).powi(2)) / pv[j]);
            ent += 0.5 * (LN_2PI + 1.0 + qv[j].ln());
        }
        let oracle = cross - ent;
        worst = worst.max((kl - oracle).abs() / oracle.abs().max(1.0));
        min_kl = min_kl.min(kl);
        let same = gaussian_kl(&q, &q).map_err(|e| e.to_string())?;
        if same.abs() > 1e-12 {
            return Err(format!("KL(q, q) = {same:e}"));
        }
    }
    ensure(
        worst <= 1e-12 && min_kl >= 0.0,
        format!("{pairs} pairs: max rel err {worst:.2e}, min KL {min_kl:.3e}"),
    )
}

fn tiny_data(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
    let x = Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal));
    let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let y = Array2::from_shape_fn((n, 1), |_| rng.sample::<f64, _>(StandardNormal) * 1.5);
    Dataset::new(x, t, y).expect("toy data")
}

/// Monte-Carlo ELBO with `samples` draws against Gauss–Hermite quadrature of the
/// reconstruction term plus the closed-form KL, per unit, in units of the MC standard error.
pub fn elbo_quadrature(samples: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = ModelConfig {
        hidden: vec![8],
        activation: Activation::Tanh,
        ..ModelConfig::new(2, 1, 1)
    };
    let p = ModelParams::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let data = tiny_data(&mut rng, 6, 2);
    let (t, y) = data.observed().expect("observed");
    let noise = draw_noise(&mut rng, samples, data.len(), 1);
    let recon_only = ElboTerms {
        reconstruction: true,
        kl: false,
    };
    let kl_only = ElboTerms {
        reconstruction: false,
        kl: true,
    };
    let neg_kl = p.elbo_rows(&data, &noise[..1], kl_only).map_err(|e| e.to_string())?;
    let mut sum = Array1::<f64>::zeros(data.len());
    let mut sum_sq = Array1::<f64>::zeros(data.len());
    for u in &noise {
        let r = p.elbo_rows(&data, std::slice::from_ref(u), recon_only).map_err(|e| e.to_string())?;
        sum += &r;
        sum_sq += &(&r * &r);
    }
    let s = samples as f64;
    let (nodes, weights) = gauss_hermite(60);
    let q = p.encode_batch(data.x.view(), y.view(), t).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for i in 0..data.len() {
        let mean = sum[i] / s;
        let se = ((sum_sq[i] / s - mean * mean).max(0.0) / s).sqrt();
        let (m, v) = (q.mean[[i, 0]], q.var[[i, 0]]);
        let mut exact = 0.0;
        for (xk, wk) in nodes.iter().zip(&weights) {
            let z = m + (2.0 * v).sqrt() * xk;
            let dec = p.decode(array![z].view(), t[i]).map_err(|e| e.to_string())?;
            let ll = -0.5 * (LN_2PI + dec.var()[0].ln() + (y[[i, 0]] - dec.mean()[0]).powi(2) / dec.var()[0]);
            exact += wk * ll;
        }
        exact /= std::f64::consts::PI.sqrt();
        let mc = mean + neg_kl[i];
        let oracle = exact + neg_kl[i];
        worst = worst.max((mc - oracle).abs() / se);
    }
    ensure(worst <= 3.0, format!("L = {samples}: max |MC - quadrature| = {worst:.2} standard errors"))
}

/// Linear-Gaussian configuration: the ELBO never exceeds the closed-form marginal
/// log-likelihood `N(y; a h + b, a^2 k + g)`.
pub fn elbo_below_marginal(samples: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = ModelConfig {
        hidden: vec![],
        ..ModelConfig::new(2, 1, 1)
    };
    let mut p = ModelParams::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let (a, b, g_raw) = (1.3, -0.2, 0.4);
    if let Decoder::Shared(d) = &mut p.decoder {
        d.net.layers = vec![Linear {
            weight: array![[a, 0.0], [0.0, 0.0]],
            bias: array![b, g_raw],
        }];
    }
    let data = tiny_data(&mut rng, 8, 2);
    let (t, y) = data.observed().expect("observed");
    let noise = draw_noise(&mut rng, samples, data.len(), 1);
    let elbo = p.elbo_rows(&data, &noise, ElboTerms::default()).map_err(|e| e.to_string())?;
    let prior = p.prior_batch(data.x.view(), Some(t)).map_err(|e| e.to_string())?;
    let g = p.decode(array![0.0].view(), 0).map_err(|e| e.to_string())?.var()[0];
    let mut slack = f64::INFINITY;
    for i in 0..data.len() {
        let (h, k) = (prior.mean[[i, 0]], prior.var[[i, 0]]);
        let var = a * a * k + g;
        let ll = -0.5 * (LN_2PI + var.ln() + (y[[i, 0]] - a * h - b).powi(2) / var);
        slack = slack.min(ll - elbo[i]);
    }
    ensure(slack > -0.05, format!("min(log p(y) - ELBO) over units = {slack:.4}"))
}

/// Finite-difference gradient check of the full objective, including the balancing term.
pub fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for (balanced, separate, gamma) in [(true, false, 0.0), (false, true, 0.0), (true, true, 1.0)] {
        let cfg = ModelConfig {
            hidden: vec![6, 5],
            balanced_prior: balanced,
            separate_decoder_heads: separate,
            activation: Activation::Tanh,
            ..ModelConfig::new(3, 2, 1)
        };
        let p = ModelParams::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let data = tiny_data(&mut rng, 10, 3);
        let noise = draw_noise(&mut rng, 2, 10, 2);
        let objective = Objective {
            terms: ElboTerms::default(),
            balance: (gamma > 0.0).then(|| BalanceConfig {
                gamma,
                sinkhorn_epsilon: 0.5,
                sinkhorn_max_iters: 10_000,
                sinkhorn_tol: 1e-13,
            }),
        };
        let err = grad_check(&p, &data, 1e-5, &objective, &noise, 400, 5).map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.2e}"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

/// Entropic OT at `eps` against the exact cost over all permutation couplings.
pub fn sinkhorn_brute_force(eps: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let cfg = BalanceConfig {
        gamma: 1.0,
        sinkhorn_epsilon: eps,
        sinkhorn_max_iters: 100_000,
        sinkhorn_tol: 1e-9,
    };
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut unconverged = 0;
    for n in 1..=5 {
        for _ in 0..20 {
            let a = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
            let b = Array2::from_shape_fn((n, 2), |_| rng.sample::<f64, _>(StandardNormal));
            let cost = |i: usize, j: usize| (a[[i, 0]] - b[[j, 0]]).powi(2) + (a[[i, 1]] - b[[j, 1]]).powi(2);
            let exact = permutations(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>() / n as f64)
                .fold(f64::INFINITY, f64::min);
            let sol = entropic_ot(a.view(), b.view(), &cfg).map_err(|e| e.to_string())?;
            unconverged += usize::from(!sol.converged);
            worst = worst.max((sol.value - exact).abs() / exact.max(1e-12));
            cases += 1;
        }
    }
    ensure(
        worst <= 0.05,
        format!(
            "{cases} sets of 1..5 points, eps {eps}: max rel err {:.2}% ({unconverged} hit the iteration cap)",
            100.0 * worst
        ),
    )
}

/// Degenerate prior with linear outcome heads: the pre-treatment CATE is exactly
/// `(a_1 - a_0) h(x) + (b_1 - b_0)`.
pub fn linear_decoder_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let cfg = ModelConfig {
        hidden: vec![7],
        degenerate_prior: true,
        separate_decoder_heads: true,
        learn_outcome_noise: false,
        ..ModelConfig::new(3, 1, 1)
    };
    let mut p = ModelParams::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let (a, b) = ([0.7, -1.9], [0.3, 2.25]);
    if let Decoder::Separate(heads) = &mut p.decoder {
        for t in 0..2 {
            let out = heads[t].net.output_dim();
            let mut w = Array2::zeros((1, out));
            let mut bias = Array1::zeros(out);
            w[[0, 0]] = a[t];
            bias[0] = b[t];
            heads[t].net.layers = vec![Linear { weight: w, bias }];
        }
    } else {
        return Err("expected separate heads".into());
    }
    let x = Array2::from_shape_fn((50, 3), |_| rng.sample::<f64, _>(StandardNormal));
    let data = Dataset::covariates_only(x.clone());
    let est = estimate_effects(&p, &data, EffectMode::Pre, 3, 9).map_err(|e| e.to_string())?;
    let h = p.prior_batch(x.view(), None).map_err(|e| e.to_string())?.mean;
    let mut worst = 0.0f64;
    for i in 0..50 {
        let z = h[[i, 0]];
        let expected = (z * a[1] + b[1]) - (z * a[0] + b[0]);
        worst = worst.max((est.tau[[i, 0]] - expected).abs());
    }
    ensure(worst <= 1e-12, format!("max |tau - analytic| = {worst:e}"))
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Factual consistency, split sizes, normalization on a fresh pre-sample, treatment-rate
/// screen, monotone outcome functions and the structure-specific correlation contracts.
pub fn synthetic_invariants(seeds: u64) -> Check {
    let mut min_var = f64::INFINITY;
    let mut max_var = 0.0f64;
    let mut max_iv = 0.0f64;
    let mut min_proxy = f64::INFINITY;
    for seed in 0..seeds {
        for family in [OutcomeFamily::Linear, OutcomeFamily::Nonlinear] {
            for structure in Structure::ALL {
                let spec = make_dgp(structure, family, 0.2, 0.2, seed).map_err(|e| e.to_string())?;
                if !(spec.treatment_rate > 0.05 && spec.treatment_rate < 0.95) {
                    return Err(format!("seed {seed}: treatment rate {}", spec.treatment_rate));
                }
                let d = sample_dgp(&spec, 1500, seed + 1000).map_err(|e| e.to_string())?;
                for i in 0..d.len() {
                    let yt = if d.t[i] == 1 { d.y1[i] } else { d.y0[i] };
                    if d.y[i].to_bits() != yt.to_bits() {
                        return Err(format!("seed {seed} {structure:?}: factual mismatch at row {i}"));
                    }
                }
                let sizes = [intact_core::Split::Train, intact_core::Split::Val, intact_core::Split::Test]
                    .map(|s| d.rows(&[s]).len());
                if sizes != [500, 500, 500] {
                    return Err(format!("split sizes {sizes:?}"));
                }
                if seed < 3 {
                    let z = spec.latent_sample(100_000, seed + 77);
                    for t in 0..2u8 {
                        let f: Vec<f64> = z.iter().map(|&zi| spec.outcome_mean(t, zi)).collect();
                        let v = variance(&f);
                        min_var = min_var.min(v);
                        max_var = max_var.max(v);
                    }
                    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    for t in 0..2u8 {
                        let grid: Vec<f64> =
                            (0..=2000).map(|k| spec.outcome_mean(t, lo + (hi - lo) * k as f64 / 2000.0)).collect();
                        let diffs: Vec<f64> = grid.windows(2).map(|w| w[1] - w[0]).collect();
                        if !(diffs.iter().all(|&v| v > 0.0) || diffs.iter().all(|&v| v < 0.0)) {
                            return Err(format!("seed {seed} {family:?}: f_{t} not strictly monotone"));
                        }
                    }
                }
                if seed < 3 && family == OutcomeFamily::Nonlinear && structure != Structure::Unconfounded {
                    let big = sample_dgp(&spec, 100_000, seed + 2000).map_err(|e| e.to_string())?;
                    let z = big.z_true.to_vec();
                    if structure == Structure::Iv {
                        for j in 0..3 {
                            max_iv = max_iv.max(corr(&big.x.column(j).to_vec(), &z).abs());
                        }
                    } else {
                        let hx: Vec<f64> = big
                            .x
                            .rows()
                            .into_iter()
                            .map(|r| r.iter().zip(&spec.h_coef).map(|(a, b)| a * b).sum())
                            .collect();
                        min_proxy = min_proxy.min(corr(&hx, &z).abs());
                    }
                }
            }
        }
        let spec = make_dgp(Structure::Proxy, OutcomeFamily::Nonlinear, 0.0, 0.2, seed).map_err(|e| e.to_string())?;
        let d = sample_dgp(&spec, 300, seed).map_err(|e| e.to_string())?;
        for i in 0..d.len() {
            if d.y0[i] != spec.outcome_mean(0, d.z_true[i]) || d.y1[i] != spec.outcome_mean(1, d.z_true[i]) {
                return Err(format!("alpha = 0 leaves noise at seed {seed}"));
            }
        }
    }
    ensure(
        min_var > 0.9 && max_var < 1.1 && max_iv < 0.02 && min_proxy > 0.2,
        format!(
            "{seeds} seeds x 3 structures x 2 families: Var(f_t/sqrt(C_t)) in [{min_var:.3}, {max_var:.3}], \
             iv |corr(x, z)| <= {max_iv:.4}, proxy |corr(h(x), z)| >= {min_proxy:.3}"
        ),
    )
}

/// A small synthetic sweep config rooted at `dir`.
pub fn smoke_config(dir: &Path, n_dgps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic();
    cfg.output_dir = dir.to_path_buf();
    cfg.model.hidden = vec![16];
    cfg.train.max_epochs = 4;
    cfg.train.patience = 4;
    cfg.train.learning_rate = 1e-3;
    cfg.estimate_samples = 5;
    cfg.experiment = ExperimentKind::Synthetic(SynthSweep {
        noise_points: vec![NoisePoint { alpha: 0.2, beta: 0.2 }],
        n_dgps,
        n_samples: 150,
        ..SynthSweep::default()
    });
    cfg
}

/// Every emitted number of a record, excluding wall-clock fields.
pub fn record_numbers(r: &RunRecord) -> serde_json::Value {
    let mut v = serde_json::to_value(r).expect("serializable record");
    let o = v.as_object_mut().expect("record object");
    o.remove("started_unix");
    o.remove("elapsed_secs");
    if let Some(t) = o.get_mut("trace").and_then(|t| t.as_object_mut()) {
        t.remove("train_secs");
    }
    v
}

/// Runs the same small sweep twice and compares every emitted number bit for bit.
pub fn end_to_end_determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ra = run_synthetic_suite(&smoke_config(a.path(), 2)).map_err(|e| e.to_string())?;
    let mut cfg_b = smoke_config(b.path(), 2);
    cfg_b.workers = 1;
    let rb = run_synthetic_suite(&cfg_b).map_err(|e| e.to_string())?;
    if ra.len() != 2 || rb.len() != 2 {
        return Err(format!("expected 2 records, got {} and {}", ra.len(), rb.len()));
    }
    for (x, y) in ra.iter().zip(&rb) {
        if !x.is_ok() {
            return Err(format!("{} failed: {:?}", x.run_id, x.error));
        }
        if record_numbers(x) != record_numbers(y) {
            return Err(format!("{} differs between replays", x.run_id));
        }
    }
    let la = std::fs::read(a.path().join("latents").join("synthetic_proxy_nonlinear_a0.2-b0.2_balanced_dgp000.csv"))
        .map_err(|e| e.to_string())?;
    let lb = std::fs::read(b.path().join("latents").join("synthetic_proxy_nonlinear_a0.2-b0.2_balanced_dgp000.csv"))
        .map_err(|e| e.to_string())?;
    ensure(la == lb, "2 runs replayed with different worker counts: records and latents bit-identical".into())
}

/// Validates every line of a records file against the published schema.
pub fn validate_records(path: &Path) -> Check {
    let schema: serde_json::Value = serde_json::from_str(RUN_RECORD_SCHEMA).map_err(|e| e.to_string())?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut n = 0;
    for (k, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", k + 1))?;
        if let Some(err) = validator.iter_errors(&v).next() {
            return Err(format!("line {}: {err} at {}", k + 1, err.instance_path()));
        }
        n += 1;
    }
    ensure(n > 0, format!("{n} records valid"))
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
