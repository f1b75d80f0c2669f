use std::path::PathBuf;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{run_jobs, ExperimentConfig, ExperimentKind, Job, RunCoords, RunOutput, RunRecord, RunSeeds, TraceSummary};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::estimation::{estimate_effects, EffectMode};
use crate::ihdp::{bundled_covariates, generate_replication, split_ihdp, IhdpArchive, IhdpReplication};
use crate::metrics::{EvalReport, RunMeta};
use crate::seed;
use crate::training::{train, TrainConfig};

/// A model configuration compared on every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhdpVariant {
    pub name: String,
    pub separate_decoder_heads: bool,
    pub balance_gamma: f64,
}

impl IhdpVariant {
    pub fn plain() -> Self {
        IhdpVariant {
            name: "plain".into(),
            separate_decoder_heads: false,
            balance_gamma: 0.0,
        }
    }

    /// Separate outcome heads plus the Sinkhorn balancing penalty.
    pub fn modified() -> Self {
        IhdpVariant {
            name: "modified".into(),
            separate_decoder_heads: true,
            balance_gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhdpSweep {
    #[serde(default)]
    pub first_replication: usize,
    pub n_replications: usize,
    pub variants: Vec<IhdpVariant>,
    /// Replication archive; falls back to `IHDP_DATA`, then to regenerated outcomes.
    #[serde(default)]
    pub archive: Option<PathBuf>,
    /// Seed of the regenerated outcome surfaces used when no archive is available.
    #[serde(default)]
    pub generated_seed: u64,
    /// Train on outcomes standardized with training-split moments.
    #[serde(default = "yes")]
    pub standardize_outcome: bool,
}

fn yes() -> bool {
    true
}

impl Default for IhdpSweep {
    fn default() -> Self {
        IhdpSweep {
            first_replication: 0,
            n_replications: 100,
            variants: vec![IhdpVariant::plain(), IhdpVariant::modified()],
            archive: None,
            generated_seed: 0,
            standardize_outcome: true,
        }
    }
}

impl IhdpSweep {
    pub fn validate(&self) -> Result<()> {
        if self.n_replications == 0 || self.variants.is_empty() {
            return Err(Error::InvalidArgument("IHDP sweep needs replications and variants".into()));
        }
        if self.variants.iter().any(|v| !(v.balance_gamma >= 0.0)) {
            return Err(Error::InvalidArgument("balance_gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Benchmark training defaults: larger steps than the synthetic harness, early stopping
/// after 50 epochs without validation improvement, and a looser Sinkhorn solve per batch.
pub(crate) fn default_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 300,
        patience: 50,
        sinkhorn_max_iters: 100,
        sinkhorn_tol: 1e-4,
        ..TrainConfig::default()
    }
}

/// Where replications come from.
#[derive(Debug)]
pub enum IhdpSource {
    Archive(IhdpArchive),
    /// Outcomes regenerated over the bundled covariates; replication `r` uses
    /// `derive(seed, [r])`.
    Generated { seed: u64 },
}

impl IhdpSource {
    /// The sweep's archive, else `IHDP_DATA`, else regenerated outcomes.
    pub fn resolve(sweep: &IhdpSweep) -> Result<Self> {
        if let Some(p) = &sweep.archive {
            return Ok(IhdpSource::Archive(IhdpArchive::open(p)?));
        }
        if let Some(a) = IhdpArchive::from_env() {
            return Ok(IhdpSource::Archive(a?));
        }
        Ok(IhdpSource::Generated {
            seed: sweep.generated_seed,
        })
    }

    pub fn describe(&self) -> String {
        match self {
            IhdpSource::Archive(a) => format!("archive {} ({} replications)", a.path().display(), a.len()),
            IhdpSource::Generated { seed } => format!("regenerated outcomes (seed {seed})"),
        }
    }

    pub fn load(&self, rep: usize) -> Result<IhdpReplication> {
        match self {
            IhdpSource::Archive(a) => a.load(rep),
            IhdpSource::Generated { seed } => {
                let (x, t) = bundled_covariates()?;
                generate_replication(&x, &t, seed::derive(*seed, &[rep as u64]))
            }
        }
    }
}

/// Trains and evaluates every variant on every replication: pre-treatment metrics on the
/// test split, post-treatment metrics on training plus validation rows. Effects are
/// scored against the noiseless means `mu1 − mu0`.
pub fn run_ihdp_suite(cfg: &ExperimentConfig, source: &IhdpSource) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let ExperimentKind::Ihdp(sweep) = &cfg.experiment else {
        return Err(Error::InvalidArgument("run_ihdp_suite needs an ihdp config".into()));
    };
    if let IhdpSource::Archive(a) = source {
        if sweep.first_replication + sweep.n_replications > a.len() {
            return Err(Error::InvalidArgument(format!(
                "replications {}..{} requested but the archive holds {}",
                sweep.first_replication,
                sweep.first_replication + sweep.n_replications,
                a.len()
            )));
        }
    }
    log::info!("IHDP source: {}", source.describe());
    let mut jobs = Vec::new();
    for rep in sweep.first_replication..sweep.first_replication + sweep.n_replications {
        for (v, variant) in sweep.variants.iter().enumerate() {
            jobs.push((
                v,
                Job {
                    index: jobs.len(),
                    run_id: format!("ihdp/{}/rep{:04}", variant.name, rep),
                    coords: RunCoords {
                        variant: Some(variant.name.clone()),
                        replication: Some(rep),
                        ..RunCoords::default()
                    },
                    seeds: RunSeeds {
                        data: cfg.run_seed("split", &[rep as u64]),
                        train: cfg.run_seed("train", &[rep as u64]),
                        estimate: cfg.run_seed("estimate", &[rep as u64]),
                    },
                },
            ));
        }
    }
    let variant_of: Vec<usize> = jobs.iter().map(|(v, _)| *v).collect();
    let jobs: Vec<Job> = jobs.into_iter().map(|(_, j)| j).collect();
    run_jobs(cfg, "ihdp", jobs, |job| {
        let rep = source.load(job.coords.replication.expect("replication coordinate"))?;
        ihdp_run(cfg, sweep, &sweep.variants[variant_of[job.index]], rep, job)
    })
}

fn ihdp_run(
    cfg: &ExperimentConfig,
    sweep: &IhdpSweep,
    variant: &IhdpVariant,
    rep: IhdpReplication,
    job: &Job,
) -> Result<RunOutput> {
    let rep = split_ihdp(rep, job.seeds.data);
    let train_rows = rep.rows(&[Split::Train])?;
    let (loc, scale) = if sweep.standardize_outcome {
        let y: Vec<f64> = train_rows.iter().map(|&i| rep.yf[i]).collect();
        let (m, s) = super::mean_std(&y);
        (m, if s > 0.0 { s } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let view = |rows: &[usize]| -> Dataset {
        let mut d = rep.dataset(rows);
        if let Some(y) = d.y.as_mut() {
            y.mapv_inplace(|v| (v - loc) / scale);
        }
        d
    };
    let mut model = cfg.model.clone();
    model.separate_decoder_heads = variant.separate_decoder_heads;
    let tcfg = TrainConfig {
        seed: job.seeds.train,
        balance_gamma: variant.balance_gamma,
        ..cfg.train.clone()
    };
    let (params, trace) = train(&model, &view(&train_rows), &view(&rep.rows(&[Split::Val])?), &tcfg)?;
    let meta = RunMeta {
        config_hash: cfg.hash(),
        data_seed: job.seeds.data,
        train_seed: job.seeds.train,
        estimate_seed: job.seeds.estimate,
    };
    let mut reports = Vec::with_capacity(2);
    for (mode, which, label) in [
        (EffectMode::Pre, &[Split::Test][..], "test"),
        (EffectMode::Post, &[Split::Train, Split::Val][..], "train+val"),
    ] {
        let rows = rep.rows(which)?;
        let est = estimate_effects(&params, &view(&rows), mode, cfg.estimate_samples, job.seeds.estimate)?;
        let tau: Array1<f64> = est.tau.column(0).mapv(|v| v * scale);
        let (y0, y1) = rep.means(&rows);
        reports.push(EvalReport::evaluate(y0.view(), y1.view(), tau.view(), mode, label, meta.clone())?);
    }
    Ok(RunOutput {
        reports,
        trace: Some(TraceSummary::from(&trace)),
    })
}
