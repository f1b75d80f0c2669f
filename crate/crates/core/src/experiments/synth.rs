use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{run_jobs, ExperimentConfig, ExperimentKind, Job, RunCoords, RunOutput, RunRecord, RunSeeds, TraceSummary};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::estimation::{estimate_effects, latent_means, EffectMode};
use crate::metrics::{affine_recovery, affine_recovery_matched, AffineFit, EvalReport, RunMeta};
use crate::model::ModelParams;
use crate::synthetic::{ate_normalization_scale, make_dgp, sample_dgp, OutcomeFamily, Structure, SynthDataset};
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `p(z | x)`.
    Balanced,
    /// `p(z | x, t)`.
    Conditional,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Balanced => "balanced",
            PriorKind::Conditional => "conditional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSweep {
    pub structures: Vec<Structure>,
    pub outcome_families: Vec<OutcomeFamily>,
    pub noise_points: Vec<NoisePoint>,
    pub n_dgps: usize,
    /// Index of the first DGP, so a sweep can be split into replayable ranges.
    #[serde(default)]
    pub first_dgp: usize,
    pub n_samples: usize,
    pub priors: Vec<PriorKind>,
    /// Rescale each DGP's outcomes so the ATEs of a noise point have unit spread.
    #[serde(default)]
    pub normalize_ate: bool,
    #[serde(default = "yes")]
    pub save_latents: bool,
}

fn yes() -> bool {
    true
}

impl Default for SynthSweep {
    fn default() -> Self {
        SynthSweep {
            structures: vec![Structure::Proxy],
            outcome_families: vec![OutcomeFamily::Nonlinear],
            noise_points: vec![NoisePoint { alpha: 0.2, beta: 0.2 }],
            n_dgps: 10,
            first_dgp: 0,
            n_samples: 1500,
            priors: vec![PriorKind::Balanced],
            normalize_ate: false,
            save_latents: true,
        }
    }
}

impl SynthSweep {
    /// Noise grid varying one level over `levels` with the other fixed at 0.2.
    pub fn noise_grid(levels: &[f64]) -> Vec<NoisePoint> {
        let mut pts: Vec<NoisePoint> = levels.iter().map(|&a| NoisePoint { alpha: a, beta: 0.2 }).collect();
        pts.extend(
            levels
                .iter()
                .filter(|&&b| b != 0.2)
                .map(|&b| NoisePoint { alpha: 0.2, beta: b }),
        );
        pts
    }

    pub fn validate(&self) -> Result<()> {
        if self.structures.is_empty() || self.outcome_families.is_empty() || self.noise_points.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one structure, family and noise point".into()));
        }
        if self.priors.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one prior kind".into()));
        }
        if self.n_samples < 30 {
            return Err(Error::InvalidArgument("n_samples must be >= 30".into()));
        }
        for p in &self.noise_points {
            if !(0.0..1.0).contains(&p.alpha) || !(p.beta > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "noise point alpha = {}, beta = {} outside [0, 1) x (0, inf)",
                    p.alpha, p.beta
                )));
            }
        }
        Ok(())
    }
}

/// Identity of one synthetic run within its sweep.
#[derive(Debug, Clone, Copy)]
struct Point {
    structure: Structure,
    family: OutcomeFamily,
    noise: NoisePoint,
    prior: PriorKind,
    dgp: usize,
}

fn run_id(p: &Point) -> String {
    format!(
        "synthetic/{}/{}/a{}-b{}/{}/dgp{:03}",
        p.structure.as_str(),
        p.family.as_str(),
        p.noise.alpha,
        p.noise.beta,
        p.prior.as_str(),
        p.dgp
    )
}

/// File holding the learned and true latents of one run.
pub fn latents_path(output_dir: &Path, run_id: &str) -> PathBuf {
    output_dir.join("latents").join(format!("{}.csv", run_id.replace('/', "_")))
}

/// Trains and evaluates one model per (structure, outcome family, noise point, prior, DGP).
///
/// DGP, sampling, training and estimation seeds depend only on the DGP index, so runs
/// that differ only in structure, noise level or prior are paired.
pub fn run_synthetic_suite(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let ExperimentKind::Synthetic(sweep) = &cfg.experiment else {
        return Err(Error::InvalidArgument("run_synthetic_suite needs a synthetic config".into()));
    };
    let mut points = Vec::new();
    for &structure in &sweep.structures {
        for &family in &sweep.outcome_families {
            for &noise in &sweep.noise_points {
                for &prior in &sweep.priors {
                    for dgp in sweep.first_dgp..sweep.first_dgp + sweep.n_dgps {
                        points.push(Point {
                            structure,
                            family,
                            noise,
                            prior,
                            dgp,
                        });
                    }
                }
            }
        }
    }
    let seeds_of = |dgp: usize| RunSeeds {
        data: cfg.run_seed("dgp", &[dgp as u64]),
        train: cfg.run_seed("train", &[dgp as u64]),
        estimate: cfg.run_seed("estimate", &[dgp as u64]),
    };
    let scales = if sweep.normalize_ate {
        normalization_scales(sweep, &points, &seeds_of)?
    } else {
        HashMap::new()
    };
    let jobs: Vec<Job> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Job {
            index,
            run_id: run_id(p),
            coords: RunCoords {
                structure: Some(p.structure),
                outcome_family: Some(p.family),
                alpha: Some(p.noise.alpha),
                beta: Some(p.noise.beta),
                variant: Some(p.prior.as_str().to_string()),
                dgp: Some(p.dgp),
                replication: None,
            },
            seeds: seeds_of(p.dgp),
        })
        .collect();
    run_jobs(cfg, "synthetic", jobs, |job| {
        let p = &points[job.index];
        let scale = scales.get(&group_key(p)).copied().unwrap_or(1.0);
        synthetic_run(cfg, sweep, p, job, scale)
    })
}

type GroupKey = (Structure, OutcomeFamily, u64, u64);

fn group_key(p: &Point) -> GroupKey {
    (p.structure, p.family, p.noise.alpha.to_bits(), p.noise.beta.to_bits())
}

fn normalization_scales(
    sweep: &SynthSweep,
    points: &[Point],
    seeds_of: &dyn Fn(usize) -> RunSeeds,
) -> Result<HashMap<GroupKey, f64>> {
    let mut ates: HashMap<GroupKey, Vec<f64>> = HashMap::new();
    for p in points.iter().filter(|p| p.prior == sweep.priors[0]) {
        let data = build_data(p, sweep.n_samples, seeds_of(p.dgp).data)?;
        ates.entry(group_key(p)).or_default().push(data.true_ate());
    }
    Ok(ates.into_iter().map(|(k, v)| (k, ate_normalization_scale(&v))).collect())
}

fn build_data(p: &Point, n: usize, seed: u64) -> Result<SynthDataset> {
    let spec = make_dgp(p.structure, p.family, p.noise.alpha, p.noise.beta, seed)?;
    sample_dgp(&spec, n, seed)
}

/// Recovery of the first true latent coordinate by the learned point representation.
pub(crate) fn recovery(params: &ModelParams, data: &Dataset, mode: EffectMode, z_true: &Array1<f64>) -> Option<AffineFit> {
    let fit = || -> Result<AffineFit> {
        let zh = latent_means(params, data, mode)?;
        let t = data.observed()?.0;
        if zh.ncols() == 1 {
            affine_recovery(&zh.column(0).to_vec(), &z_true.to_vec(), t)
        } else {
            let zt = z_true.view().insert_axis(ndarray::Axis(1));
            Ok(affine_recovery_matched(zh.view(), zt, t)?[0].1)
        }
    };
    fit().map_err(|e| log::warn!("affine recovery skipped: {e}")).ok()
}

fn synthetic_run(cfg: &ExperimentConfig, sweep: &SynthSweep, p: &Point, job: &Job, scale: f64) -> Result<RunOutput> {
    let mut data = build_data(p, sweep.n_samples, job.seeds.data)?;
    if scale != 1.0 {
        data.scale_outcomes(scale);
    }
    let mut model = cfg.model.clone();
    model.balanced_prior = p.prior == PriorKind::Balanced;
    let tcfg = TrainConfig {
        seed: job.seeds.train,
        ..cfg.train.clone()
    };
    let rows = |s: &[Split]| data.rows(s);
    let (train_rows, val_rows, test_rows, tv_rows) = (
        rows(&[Split::Train]),
        rows(&[Split::Val]),
        rows(&[Split::Test]),
        rows(&[Split::Train, Split::Val]),
    );
    let (params, trace) = train(&model, &data.dataset(&train_rows), &data.dataset(&val_rows), &tcfg)?;
    let meta = RunMeta {
        config_hash: cfg.hash(),
        data_seed: job.seeds.data,
        train_seed: job.seeds.train,
        estimate_seed: job.seeds.estimate,
    };
    let mut reports = Vec::with_capacity(2);
    for (mode, rows, label) in [(EffectMode::Pre, &test_rows, "test"), (EffectMode::Post, &tv_rows, "train+val")] {
        let d = data.dataset(rows);
        let est = estimate_effects(&params, &d, mode, cfg.estimate_samples, job.seeds.estimate)?;
        let (y0, y1, zt) = data.select_truth(rows);
        let mut rep = EvalReport::evaluate(y0.view(), y1.view(), est.tau.column(0), mode, label, meta.clone())?;
        rep.affine = recovery(&params, &d, mode, &zt);
        reports.push(rep);
    }
    if sweep.save_latents {
        write_latents(&latents_path(&cfg.output_dir, &job.run_id), &params, &data)?;
    }
    Ok(RunOutput {
        reports,
        trace: Some(TraceSummary::from(&trace)),
    })
}

/// One row of a latents file.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub split: Split,
    pub t: u8,
    pub z_true: f64,
    pub z_pre: Vec<f64>,
    pub z_post: Vec<f64>,
}

fn write_latents(path: &Path, params: &ModelParams, data: &SynthDataset) -> Result<()> {
    let all: Vec<usize> = (0..data.len()).collect();
    let d = data.dataset(&all);
    let pre: Array2<f64> = latent_means(params, &d, EffectMode::Pre)?;
    let post: Array2<f64> = latent_means(params, &d, EffectMode::Post)?;
    let dir = path.parent().expect("latents path has a parent");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut wr = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let k = pre.ncols();
    let mut header = vec!["split".to_string(), "t".into(), "z_true".into()];
    header.extend((0..k).map(|j| format!("z_pre_{j}")));
    header.extend((0..k).map(|j| format!("z_post_{j}")));
    wr.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
    for i in 0..data.len() {
        let mut rec = vec![
            data.split[i].as_str().to_string(),
            data.t[i].to_string(),
            data.z_true[i].to_string(),
        ];
        rec.extend(pre.row(i).iter().map(|v| v.to_string()));
        rec.extend(post.row(i).iter().map(|v| v.to_string()));
        wr.write_record(&rec).map_err(|e| Error::format(path, e.to_string()))?;
    }
    wr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let width = rd.headers().map_err(|e| Error::format(path, e.to_string()))?.len();
    if width < 5 || (width - 3) % 2 != 0 {
        return Err(Error::format(path, "expected split,t,z_true,z_pre_*,z_post_* columns"));
    }
    let k = (width - 3) / 2;
    let mut out = Vec::new();
    for (r, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let num = |c: usize| -> Result<f64> {
            rec[c]
                .parse()
                .map_err(|_| Error::format(path, format!("row {r}, column {c}: not a number")))
        };
        let split = Split::parse(&rec[0]).ok_or_else(|| Error::format(path, format!("row {r}: bad split")))?;
        out.push(LatentRow {
            split,
            t: u8::from(num(1)? == 1.0),
            z_true: num(2)?,
            z_pre: (0..k).map(|j| num(3 + j)).collect::<Result<_>>()?,
            z_post: (0..k).map(|j| num(3 + k + j)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}
