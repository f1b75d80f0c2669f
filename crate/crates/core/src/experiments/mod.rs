//! Experiment orchestration: sweep configuration, seed fan-out, run records and the
//! single-writer record sink.

mod ihdp_suite;
mod report;
mod synth;
mod verify;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::ModelConfig;
use crate::seed;
use crate::synthetic::{OutcomeFamily, Structure};
use crate::training::{TrainConfig, TrainTrace};

pub use ihdp_suite::{run_ihdp_suite, IhdpSource, IhdpSweep, IhdpVariant};
pub use report::{
    ihdp_table, render_report, scatter_plot, summarize, summary_csv, summary_markdown, PlotRequest, ReportFormat,
    SummaryRow,
};
pub use synth::{latents_path, read_latents, run_synthetic_suite, LatentRow, NoisePoint, PriorKind, SynthSweep};
pub use verify::{
    assess_identifiability, verify_identifiability, verify_theorem3, IdentConfig, IdentDgp, IdentReport, LatentFit,
    ScoreOutcome, Theorem3Config, Theorem3Report,
};

pub const SCHEMA_VERSION: u32 = 1;

/// JSON schema every line of `records.jsonl` satisfies.
pub const RUN_RECORD_SCHEMA: &str = include_str!("../../../../schema/run_record.schema.json");

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    Synthetic(SynthSweep),
    Ihdp(IhdpSweep),
    VerifyIdentifiability(IdentConfig),
    VerifyTheorem3(Theorem3Config),
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Synthetic(_) => "synthetic",
            ExperimentKind::Ihdp(_) => "ihdp",
            ExperimentKind::VerifyIdentifiability(_) => "verify_identifiability",
            ExperimentKind::VerifyTheorem3(_) => "verify_theorem3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses the global pool.
    #[serde(default)]
    pub workers: usize,
    pub model: ModelConfig,
    /// Optimization and balancing settings; `balance_gamma > 0` enables the penalty.
    pub train: TrainConfig,
    /// Monte-Carlo draws per unit for effect estimation.
    pub estimate_samples: usize,
    pub experiment: ExperimentKind,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Training defaults for the experiment harness. Selection is by best validation ELBO
/// over the whole epoch budget.
pub fn harness_train_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 300,
        patience: 300,
        ..TrainConfig::default()
    }
}

impl ExperimentConfig {
    fn with(experiment: ExperimentKind, model: ModelConfig, train: TrainConfig) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            master_seed: 0,
            output_dir: PathBuf::from("runs"),
            workers: 0,
            model,
            train,
            estimate_samples: 100,
            experiment,
        }
    }

    pub fn synthetic() -> Self {
        Self::with(
            ExperimentKind::Synthetic(SynthSweep::default()),
            ModelConfig::synthetic(),
            harness_train_config(),
        )
    }

    pub fn ihdp() -> Self {
        Self::with(
            ExperimentKind::Ihdp(IhdpSweep::default()),
            ModelConfig::ihdp(),
            ihdp_suite::default_train_config(),
        )
    }

    pub fn identifiability() -> Self {
        Self::with(
            ExperimentKind::VerifyIdentifiability(IdentConfig::default()),
            ModelConfig::synthetic(),
            harness_train_config(),
        )
    }

    pub fn theorem3() -> Self {
        let mut model = ModelConfig::synthetic();
        model.degenerate_prior = true;
        model.learn_outcome_noise = false;
        model.separate_decoder_heads = true;
        let t3 = Theorem3Config::default();
        model.outcome_var = t3.noise_sd * t3.noise_sd;
        Self::with(ExperimentKind::VerifyTheorem3(t3), model, verify::theorem3_train_config())
    }

    pub fn default_for(kind: &str) -> Option<Self> {
        match kind {
            "synthetic" => Some(Self::synthetic()),
            "ihdp" => Some(Self::ihdp()),
            "verify_identifiability" => Some(Self::identifiability()),
            "verify_theorem3" => Some(Self::theorem3()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.estimate_samples == 0 {
            return Err(Error::InvalidArgument("estimate_samples must be >= 1".into()));
        }
        let dims = |p: usize| -> Result<()> {
            if self.model.covariate_dim != p || self.model.outcome_dim != 1 {
                return Err(Error::InvalidArgument(format!(
                    "{} experiments need covariate_dim = {p} and outcome_dim = 1",
                    self.experiment.name()
                )));
            }
            Ok(())
        };
        match &self.experiment {
            ExperimentKind::Synthetic(s) => {
                dims(crate::synthetic::COV_DIM)?;
                s.validate()
            }
            ExperimentKind::Ihdp(s) => {
                dims(crate::ihdp::COVARIATES)?;
                s.validate()
            }
            ExperimentKind::VerifyIdentifiability(s) => {
                dims(crate::synthetic::COV_DIM)?;
                s.validate()
            }
            ExperimentKind::VerifyTheorem3(s) => {
                dims(verify::THM3_COV_DIM)?;
                if self.model.latent_dim != 1 {
                    return Err(Error::InvalidArgument("verify_theorem3 needs latent_dim = 1".into()));
                }
                s.validate()
            }
        }
    }

    /// SHA-256 over the canonical JSON of everything that affects results (the output
    /// directory and worker count are excluded). First 16 hex digits.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
            m.remove("workers");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Seed for one stream of one run: `derive(master_seed, [tag(stream), coords...])`.
    pub fn run_seed(&self, stream: &str, coords: &[u64]) -> u64 {
        let mut c = Vec::with_capacity(coords.len() + 1);
        c.push(seed::tag(stream));
        c.extend_from_slice(coords);
        seed::derive(self.master_seed, &c)
    }
}

/// Where a run sits in its sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCoords {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<Structure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_family: Option<OutcomeFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Prior kind (synthetic) or configuration variant name (IHDP).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgp: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replication: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub data: u64,
    pub train: u64,
    pub estimate: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub initial_val_elbo: f64,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_elbo: f64,
    pub final_train_elbo: f64,
    pub clipping_enabled_at: Option<(usize, usize)>,
    pub train_secs: f64,
}

impl From<&TrainTrace> for TraceSummary {
    fn from(t: &TrainTrace) -> Self {
        let last = t.epochs.last();
        TraceSummary {
            initial_val_elbo: t.initial_val_elbo,
            stopped_epoch: t.stopped_epoch,
            best_epoch: t.best_epoch,
            best_val_elbo: t.best_val_elbo,
            final_train_elbo: last.map_or(f64::NAN, |e| e.train_elbo),
            clipping_enabled_at: t.clipping_enabled_at,
            train_secs: last.map_or(0.0, |e| e.elapsed_secs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub kind: String,
    pub run_id: String,
    /// Position in the sweep's deterministic job order.
    pub index: usize,
    pub config_hash: String,
    pub coords: RunCoords,
    pub seeds: RunSeeds,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Pre-treatment report first, then post-treatment.
    pub reports: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceSummary>,
    pub started_unix: f64,
    pub elapsed_secs: f64,
}

impl RunRecord {
    pub fn report(&self, mode: crate::estimation::EffectMode) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.mode == mode)
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// What a job returns before bookkeeping is attached.
pub(crate) struct RunOutput {
    pub reports: Vec<EvalReport>,
    pub trace: Option<TraceSummary>,
}

/// A unit of sweep work.
pub(crate) struct Job {
    pub index: usize,
    pub run_id: String,
    pub coords: RunCoords,
    pub seeds: RunSeeds,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Runs `jobs` on a worker pool; each finished record is appended to `records.jsonl` by a
/// single writer thread. A failing or panicking job becomes a `failed` record and never
/// affects other jobs. Returns records in job order.
pub(crate) fn run_jobs<F>(cfg: &ExperimentConfig, kind: &str, jobs: Vec<Job>, f: F) -> Result<Vec<RunRecord>>
where
    F: Fn(&Job) -> Result<RunOutput> + Sync,
{
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(RECORDS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let hash = cfg.hash();
    let (tx, rx) = mpsc::channel::<RunRecord>();
    let writer_path = path.clone();
    let writer = std::thread::spawn(move || -> Result<Vec<RunRecord>> {
        let mut out = std::io::BufWriter::new(file);
        let mut all = Vec::new();
        for rec in rx {
            let line = serde_json::to_string(&rec)?;
            writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| Error::io(&writer_path, e))?;
            all.push(rec);
        }
        Ok(all)
    });
    let execute = |job: &Job| -> RunRecord {
        let started = unix_now();
        let clock = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(job)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(Error::InvalidArgument(format!("run panicked: {msg}")))
            });
        let (status, error, reports, trace) = match outcome {
            Ok(o) => (RunStatus::Ok, None, o.reports, o.trace),
            Err(e) => {
                log::warn!("run {} failed: {e}", job.run_id);
                (RunStatus::Failed, Some(e.to_string()), Vec::new(), None)
            }
        };
        RunRecord {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            run_id: job.run_id.clone(),
            index: job.index,
            config_hash: hash.clone(),
            coords: job.coords.clone(),
            seeds: job.seeds,
            status,
            error,
            reports,
            trace,
            started_unix: started,
            elapsed_secs: clock.elapsed().as_secs_f64(),
        }
    };
    let work = || {
        jobs.par_iter().for_each_with(tx.clone(), |tx, job| {
            let rec = execute(job);
            log::info!("finished {} ({:.1}s)", rec.run_id, rec.elapsed_secs);
            // the writer only stops after every sender is dropped
            let _ = tx.send(rec);
        })
    };
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?
            .install(work);
    } else {
        work();
    }
    drop(tx);
    let mut records = writer
        .join()
        .map_err(|_| Error::InvalidArgument("record writer panicked".into()))??;
    records.sort_by_key(|r| r.index);
    write_summary(&cfg.output_dir.join(SUMMARY_FILE), &records)?;
    Ok(records)
}

/// Per-report CSV rows prefixed with the run identity.
pub fn write_summary(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut out = format!("run_id,status,{}\n", EvalReport::CSV_HEADER);
    for r in records {
        if r.reports.is_empty() {
            out.push_str(&format!("{},{}{}\n", r.run_id, status_str(r.status), ",".repeat(15)));
        }
        for rep in &r.reports {
            out.push_str(&format!("{},{},{}\n", r.run_id, status_str(r.status), rep.csv_row()));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn status_str(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Ok => "ok",
        RunStatus::Failed => "failed",
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Runs whichever experiment `cfg` describes and returns a JSON summary of the outcome.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    cfg.validate()?;
    Ok(match &cfg.experiment {
        ExperimentKind::Synthetic(_) => serde_json::to_value(run_synthetic_suite(cfg)?.len())?,
        ExperimentKind::Ihdp(s) => {
            let source = IhdpSource::resolve(s)?;
            serde_json::to_value(run_ihdp_suite(cfg, &source)?.len())?
        }
        ExperimentKind::VerifyIdentifiability(_) => serde_json::to_value(verify_identifiability(cfg)?)?,
        ExperimentKind::VerifyTheorem3(_) => serde_json::to_value(verify_theorem3(cfg)?)?,
    })
}

fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Median of a sample, ignoring NaN.
pub fn sample_median(v: &[f64]) -> f64 {
    median(v)
}

/// Mean and standard deviation (n − 1 denominator; 0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
