//! Theory diagnostics: affine identifiability across initializations and score recovery
//! with a degenerate prior.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_median, ExperimentConfig, ExperimentKind, TraceSummary};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::estimation::{estimate_effects, latent_means, EffectMode};
use crate::gaussian::sigmoid;
use crate::metrics::{affine_recovery, AffineFit};
use crate::model::ModelParams;
use crate::seed;
use crate::synthetic::{make_dgp, sample_dgp, OutcomeFamily, Structure};
use crate::training::{train, TrainConfig};

pub(crate) const THM3_COV_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentConfig {
    pub structure: Structure,
    pub outcome_family: OutcomeFamily,
    pub alpha: f64,
    pub beta: f64,
    pub n_dgps: usize,
    #[serde(default)]
    pub first_dgp: usize,
    pub n_samples: usize,
    /// Minimum R² for every fit.
    pub threshold: f64,
    /// Also fit a treatment-conditional prior for comparison.
    pub conditional_contrast: bool,
}

impl Default for IdentConfig {
    fn default() -> Self {
        IdentConfig {
            structure: Structure::Proxy,
            outcome_family: OutcomeFamily::Nonlinear,
            alpha: 0.05,
            beta: 0.05,
            n_dgps: 1,
            first_dgp: 0,
            n_samples: 1500,
            threshold: 0.9,
            conditional_contrast: true,
        }
    }
}

impl IdentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_dgps == 0 || self.n_samples < 30 {
            return Err(Error::InvalidArgument("identifiability check needs n_dgps >= 1 and n_samples >= 30".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument("threshold must lie in [0, 1]".into()));
        }
        if self.alpha > 0.05 {
            log::warn!("identifiability check is intended for low outcome noise (alpha <= 0.05)");
        }
        Ok(())
    }
}

/// Recovery of the true latent by the prior mean (pre) and the encoder mean (post).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFit {
    pub pre: AffineFit,
    pub post: AffineFit,
    pub trace: TraceSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentDgp {
    pub dgp: usize,
    pub data_seed: u64,
    /// Two balanced-prior models differing only in their initialization seed.
    pub balanced: [LatentFit; 2],
    /// Affine fit of the second model's prior mean on the first's.
    pub cross: AffineFit,
    pub conditional: Option<LatentFit>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentReport {
    pub config_hash: String,
    pub threshold: f64,
    pub dgps: Vec<IdentDgp>,
    pub median_cross_r2: f64,
    pub median_gc_balanced: f64,
    pub median_gc_conditional: Option<f64>,
    pub passed: bool,
}

/// Checks two learned latents against the truth and against each other. Passes when every
/// pooled R² reaches `threshold`.
pub fn assess_identifiability(
    z_a: &[f64],
    z_b: &[f64],
    z_true: &[f64],
    t: &[u8],
    threshold: f64,
) -> Result<([AffineFit; 2], AffineFit, bool)> {
    let fa = affine_recovery(z_a, z_true, t)?;
    let fb = affine_recovery(z_b, z_true, t)?;
    let cross = affine_recovery(z_b, z_a, t)?;
    let passed = [fa.pooled.r2, fb.pooled.r2, cross.pooled.r2]
        .iter()
        .all(|&r| r >= threshold);
    Ok(([fa, fb], cross, passed))
}

fn fit_latents(params: &ModelParams, data: &Dataset, z_true: &[f64]) -> Result<(Vec<f64>, AffineFit, AffineFit)> {
    let t = data.observed()?.0;
    let pre = latent_means(params, data, EffectMode::Pre)?.column(0).to_vec();
    let post = latent_means(params, data, EffectMode::Post)?.column(0).to_vec();
    let fpre = affine_recovery(&pre, z_true, t)?;
    let fpost = affine_recovery(&post, z_true, t)?;
    Ok((pre, fpre, fpost))
}

/// Trains two balanced-prior models with different initialization seeds on the same
/// low-noise data, and optionally a treatment-conditional one, then compares the learned
/// prior means with the true latent and with each other. Writes `ident_report.json`.
pub fn verify_identifiability(cfg: &ExperimentConfig) -> Result<IdentReport> {
    cfg.validate()?;
    let ExperimentKind::VerifyIdentifiability(ic) = &cfg.experiment else {
        return Err(Error::InvalidArgument("verify_identifiability needs an identifiability config".into()));
    };
    let dgps = (ic.first_dgp..ic.first_dgp + ic.n_dgps)
        .into_par_iter()
        .map(|dgp| ident_dgp(cfg, ic, dgp))
        .collect::<Result<Vec<_>>>()?;
    let median_cross_r2 = sample_median(&dgps.iter().map(|d| d.cross.pooled.r2).collect::<Vec<_>>());
    let median_gc_balanced = sample_median(
        &dgps
            .iter()
            .flat_map(|d| d.balanced.iter().map(|f| f.pre.group_consistency))
            .collect::<Vec<_>>(),
    );
    let median_gc_conditional = ic.conditional_contrast.then(|| {
        sample_median(
            &dgps
                .iter()
                .filter_map(|d| d.conditional.as_ref().map(|c| c.pre.group_consistency))
                .collect::<Vec<_>>(),
        )
    });
    let report = IdentReport {
        config_hash: cfg.hash(),
        threshold: ic.threshold,
        passed: dgps.iter().all(|d| d.passed),
        dgps,
        median_cross_r2,
        median_gc_balanced,
        median_gc_conditional,
    };
    write_json(cfg, "ident_report.json", &report)?;
    Ok(report)
}

fn ident_dgp(cfg: &ExperimentConfig, ic: &IdentConfig, dgp: usize) -> Result<IdentDgp> {
    let data_seed = cfg.run_seed("dgp", &[dgp as u64]);
    let spec = make_dgp(ic.structure, ic.outcome_family, ic.alpha, ic.beta, data_seed)?;
    let data = sample_dgp(&spec, ic.n_samples, data_seed)?;
    let tr = data.dataset(&data.rows(&[Split::Train]));
    let va = data.dataset(&data.rows(&[Split::Val]));
    let eval_rows = data.rows(&[Split::Train, Split::Val]);
    let ev = data.dataset(&eval_rows);
    let z_true = data.select_truth(&eval_rows).2.to_vec();
    let fit = |balanced: bool, init: u64| -> Result<(Vec<f64>, LatentFit)> {
        let mut model = cfg.model.clone();
        model.balanced_prior = balanced;
        let tcfg = TrainConfig {
            seed: cfg.run_seed("init", &[dgp as u64, init]),
            ..cfg.train.clone()
        };
        let (params, trace) = train(&model, &tr, &va, &tcfg)?;
        let (pre_z, pre, post) = fit_latents(&params, &ev, &z_true)?;
        Ok((
            pre_z,
            LatentFit {
                pre,
                post,
                trace: TraceSummary::from(&trace),
            },
        ))
    };
    let (za, fa) = fit(true, 0)?;
    let (zb, fb) = fit(true, 1)?;
    let t = ev.observed()?.0;
    let (_, cross, passed) = assess_identifiability(&za, &zb, &z_true, t, ic.threshold)?;
    let conditional = if ic.conditional_contrast {
        Some(fit(false, 0)?.1)
    } else {
        None
    };
    Ok(IdentDgp {
        dgp,
        data_seed,
        balanced: [fa, fb],
        cross,
        conditional,
        passed,
    })
}

/// Outcome functions `j_0, j_1` of the score-matching check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOutcome {
    /// `j_0(s) = s`, `j_1(s) = 1.5 s + 0.5`.
    Linear,
    /// `j_0 = j_1 = s`.
    Null,
    /// `j_0(s) = s + 0.3 tanh(2s)`, `j_1(s) = 0.5 + 1.5 s + 0.3 tanh(3s)`.
    Nonlinear,
}

impl ScoreOutcome {
    pub fn eval(self, t: u8, s: f64) -> f64 {
        match (self, t) {
            (ScoreOutcome::Linear, 0) | (ScoreOutcome::Null, _) => s,
            (ScoreOutcome::Linear, _) => 1.5 * s + 0.5,
            (ScoreOutcome::Nonlinear, 0) => s + 0.3 * (2.0 * s).tanh(),
            (ScoreOutcome::Nonlinear, _) => 0.5 + 1.5 * s + 0.3 * (3.0 * s).tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Config {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Coefficients of the linear score `O(x) = c·x`.
    pub score_coef: [f64; THM3_COV_DIM],
    pub outcome: ScoreOutcome,
    pub noise_sd: f64,
    pub r2_threshold: f64,
    pub rmse_threshold: f64,
}

impl Default for Theorem3Config {
    fn default() -> Self {
        Theorem3Config {
            n_train: 10_000,
            n_val: 2_000,
            n_test: 2_000,
            score_coef: [0.8, -0.5, 0.3],
            outcome: ScoreOutcome::Linear,
            noise_sd: 0.1,
            r2_threshold: 0.95,
            rmse_threshold: 0.05,
        }
    }
}

impl Theorem3Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 30 || self.n_val < 30 || self.n_test < 30 {
            return Err(Error::InvalidArgument("score check needs at least 30 rows per split".into()));
        }
        if !(self.noise_sd >= 0.0) || self.score_coef.iter().all(|&c| c == 0.0) {
            return Err(Error::InvalidArgument("noise_sd must be >= 0 and the score nonzero".into()));
        }
        Ok(())
    }

    pub fn score(&self, x: ndarray::ArrayView1<f64>) -> f64 {
        x.iter().zip(&self.score_coef).map(|(a, b)| a * b).sum()
    }
}

pub(crate) fn theorem3_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 200,
        patience: 20,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    pub config_hash: String,
    pub outcome: ScoreOutcome,
    /// Fit of the learned prior mean `h(x)` on the true score `O(x)`, test rows.
    pub recovery: AffineFit,
    pub cate_rmse: f64,
    pub cate_max_abs: f64,
    pub trace: TraceSummary,
    pub passed: bool,
}

/// Score-matching sample: `x ~ N(0, I)`, `s = O(x)`, `t ~ Bernoulli(sigmoid(2s))`,
/// `y = j_t(s) + noise_sd · e`. Returns the dataset and the score.
pub fn theorem3_data(c: &Theorem3Config, n: usize, seed: u64) -> (Dataset, Array1<f64>) {
    let mut rng = seed::rng(seed, &[seed::tag("thm3")]);
    let x = Array2::from_shape_fn((n, THM3_COV_DIM), |_| StandardNormal.sample(&mut rng));
    let s: Array1<f64> = x.rows().into_iter().map(|r| c.score(r)).collect();
    let mut t = vec![0u8; n];
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        t[i] = u8::from(rng.random::<f64>() < sigmoid(2.0 * s[i]));
        let e: f64 = StandardNormal.sample(&mut rng);
        y[[i, 0]] = c.outcome.eval(t[i], s[i]) + c.noise_sd * e;
    }
    (Dataset::new(x, t, y).expect("consistent rows"), s)
}

/// Fits a degenerate-prior model to a linear-score truth and scores both the recovered
/// score and the CATE against `j_1(O(x)) − j_0(O(x))`. Writes `theorem3_report.json`.
pub fn verify_theorem3(cfg: &ExperimentConfig) -> Result<Theorem3Report> {
    cfg.validate()?;
    let ExperimentKind::VerifyTheorem3(c) = &cfg.experiment else {
        return Err(Error::InvalidArgument("verify_theorem3 needs a theorem3 config".into()));
    };
    let m = &cfg.model;
    if !m.degenerate_prior || !m.balanced_prior || m.learn_outcome_noise {
        return Err(Error::InvalidArgument(
            "verify_theorem3 needs degenerate_prior, balanced_prior and a fixed outcome noise".into(),
        ));
    }
    let (tr, _) = theorem3_data(c, c.n_train, cfg.run_seed("data", &[0]));
    let (va, _) = theorem3_data(c, c.n_val, cfg.run_seed("data", &[1]));
    let (te, s_test) = theorem3_data(c, c.n_test, cfg.run_seed("data", &[2]));
    let tcfg = TrainConfig {
        seed: cfg.run_seed("train", &[]),
        ..cfg.train.clone()
    };
    let (params, trace) = train(m, &tr, &va, &tcfg)?;
    let report = score_report(cfg, c, &params, &te, &s_test, TraceSummary::from(&trace))?;
    write_json(cfg, "theorem3_report.json", &report)?;
    Ok(report)
}

pub(crate) fn score_report(
    cfg: &ExperimentConfig,
    c: &Theorem3Config,
    params: &ModelParams,
    te: &Dataset,
    s_test: &Array1<f64>,
    trace: TraceSummary,
) -> Result<Theorem3Report> {
    let h = latent_means(params, te, EffectMode::Pre)?.column(0).to_vec();
    let recovery = affine_recovery(&h, &s_test.to_vec(), te.observed()?.0)?;
    let est = estimate_effects(params, &Dataset::covariates_only(te.x.clone()), EffectMode::Pre, 1, 0)?;
    let err: Vec<f64> = s_test
        .iter()
        .zip(est.tau.column(0))
        .map(|(&s, &tau)| tau - (c.outcome.eval(1, s) - c.outcome.eval(0, s)))
        .collect();
    let cate_rmse = (err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64).sqrt();
    let cate_max_abs = err.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    Ok(Theorem3Report {
        config_hash: cfg.hash(),
        outcome: c.outcome,
        passed: recovery.pooled.r2 >= c.r2_threshold && cate_rmse <= c.rmse_threshold,
        recovery,
        cate_rmse,
        cate_max_abs,
        trace,
    })
}

fn write_json<T: Serialize>(cfg: &ExperimentConfig, name: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(name);
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Decoder, ModelConfig};
    use crate::nn::Linear;
    use ndarray::array;

    #[test]
    fn exact_affine_latents_pass() {
        let z: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let t: Vec<u8> = (0..200).map(|i| (i % 3 == 0) as u8).collect();
        let za: Vec<f64> = z.iter().map(|v| 2.0 * v + 3.0).collect();
        let zb: Vec<f64> = z.iter().map(|v| -0.5 * v + 1.0).collect();
        let (fits, cross, passed) = assess_identifiability(&za, &zb, &z, &t, 0.999).unwrap();
        assert!(passed);
        assert!((fits[0].pooled.r2 - 1.0).abs() < 1e-12);
        assert!((cross.pooled.r2 - 1.0).abs() < 1e-12);
        assert!(cross.group_consistency < 1e-12);
    }

    #[test]
    fn unrelated_latent_fails() {
        let z: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let t: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let noise: Vec<f64> = (0..200).map(|i| ((i * 7919) % 101) as f64).collect();
        let (_, _, passed) = assess_identifiability(&z, &noise, &z, &t, 0.9).unwrap();
        assert!(!passed);
    }

    #[test]
    fn injected_truth_gives_zero_cate_error() {
        let c = Theorem3Config::default();
        let model = ModelConfig {
            hidden: vec![],
            degenerate_prior: true,
            learn_outcome_noise: false,
            separate_decoder_heads: true,
            outcome_var: 0.01,
            ..ModelConfig::new(3, 1, 1)
        };
        let mut rng = seed::rng(1, &[]);
        let mut p = ModelParams::init(&model, &mut rng).unwrap();
        p.prior.net.layers = vec![Linear {
            weight: Array2::from_shape_vec((3, 1), c.score_coef.to_vec()).unwrap(),
            bias: array![0.0],
        }];
        let (a, b) = ([1.0, 1.5], [0.0, 0.5]);
        if let Decoder::Separate(heads) = &mut p.decoder {
            for t in 0..2 {
                heads[t].net.layers = vec![Linear {
                    weight: array![[a[t]]],
                    bias: array![b[t]],
                }];
            }
        }
        let mut cfg = ExperimentConfig::theorem3();
        cfg.output_dir = std::env::temp_dir();
        let (te, s) = theorem3_data(&c, 500, 3);
        let trace = TraceSummary {
            initial_val_elbo: 0.0,
            stopped_epoch: 0,
            best_epoch: 0,
            best_val_elbo: 0.0,
            final_train_elbo: 0.0,
            clipping_enabled_at: None,
            train_secs: 0.0,
        };
        let r = score_report(&cfg, &c, &p, &te, &s, trace).unwrap();
        assert!(r.cate_max_abs < 1e-12, "{}", r.cate_max_abs);
        assert!((r.recovery.pooled.r2 - 1.0).abs() < 1e-12);
        assert!(r.passed);
    }

    #[test]
    fn null_outcome_has_zero_effect() {
        for s in [-1.0, 0.0, 2.5] {
            assert_eq!(ScoreOutcome::Null.eval(1, s) - ScoreOutcome::Null.eval(0, s), 0.0);
        }
        // strictly increasing in s for both arms
        for o in [ScoreOutcome::Linear, ScoreOutcome::Nonlinear] {
            for t in 0..2u8 {
                let v: Vec<f64> = (-20..20).map(|k| o.eval(t, k as f64 * 0.2)).collect();
                assert!(v.windows(2).all(|w| w[1] > w[0]));
            }
        }
    }
}
