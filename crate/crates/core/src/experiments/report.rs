//! Summary tables and latent scatter plots from run records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{latents_path, read_latents, LatentRow};
use super::{mean_std, read_records, RunRecord};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::estimation::EffectMode;

/// Aggregate over the runs sharing every coordinate except the DGP or replication index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub kind: String,
    pub structure: String,
    pub outcome_family: String,
    pub alpha: String,
    pub beta: String,
    pub variant: String,
    pub mode: EffectMode,
    pub split: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub eps_ate: (f64, f64),
    pub sqrt_pehe: (f64, f64),
    pub pooled_r2: Option<(f64, f64)>,
    pub group_consistency: Option<(f64, f64)>,
}

impl SummaryRow {
    /// Standard error of a column's mean.
    pub fn std_err(&self, (_, sd): (f64, f64)) -> f64 {
        if self.n_ok == 0 {
            f64::NAN
        } else {
            sd / (self.n_ok as f64).sqrt()
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, |x| x.to_string())
}

/// Groups records in first-appearance order; failed runs are counted but not averaged.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, EffectMode)> = Vec::new();
    let mut groups: BTreeMap<(String, u8), (SummaryRow, Vec<[Option<f64>; 4]>)> = BTreeMap::new();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    let key_of = |r: &RunRecord| {
        let c = &r.coords;
        [
            r.kind.clone(),
            opt(&c.structure.map(|s| s.as_str())),
            opt(&c.outcome_family.map(|s| s.as_str())),
            opt(&c.alpha),
            opt(&c.beta),
            opt(&c.variant),
        ]
    };
    for r in records {
        let k = key_of(r);
        let base = k.join("|");
        if !r.is_ok() {
            *failures.entry(base).or_default() += 1;
            continue;
        }
        for rep in &r.reports {
            let mode_id = match rep.mode {
                EffectMode::Pre => 0u8,
                EffectMode::Post => 1,
            };
            let entry = groups.entry((base.clone(), mode_id)).or_insert_with(|| {
                order.push((base.clone(), rep.mode));
                (
                    SummaryRow {
                        kind: k[0].clone(),
                        structure: k[1].clone(),
                        outcome_family: k[2].clone(),
                        alpha: k[3].clone(),
                        beta: k[4].clone(),
                        variant: k[5].clone(),
                        mode: rep.mode,
                        split: rep.split.clone(),
                        n_ok: 0,
                        n_failed: 0,
                        eps_ate: (f64::NAN, f64::NAN),
                        sqrt_pehe: (f64::NAN, f64::NAN),
                        pooled_r2: None,
                        group_consistency: None,
                    },
                    Vec::new(),
                )
            });
            entry.1.push([
                Some(rep.eps_ate),
                Some(rep.sqrt_pehe),
                rep.affine.map(|a| a.pooled.r2),
                rep.affine.map(|a| a.group_consistency),
            ]);
        }
    }
    order
        .into_iter()
        .map(|(base, mode)| {
            let mode_id = u8::from(mode == EffectMode::Post);
            let (mut row, vals) = groups.remove(&(base.clone(), mode_id)).expect("group recorded");
            let col = |j: usize| -> Vec<f64> { vals.iter().filter_map(|v| v[j]).collect() };
            row.n_ok = vals.len();
            row.n_failed = failures.get(&base).copied().unwrap_or(0);
            row.eps_ate = mean_std(&col(0));
            row.sqrt_pehe = mean_std(&col(1));
            let (r2, gc) = (col(2), col(3));
            row.pooled_r2 = (!r2.is_empty()).then(|| mean_std(&r2));
            row.group_consistency = (!gc.is_empty()).then(|| mean_std(&gc));
            row
        })
        .collect()
}

const SUMMARY_COLUMNS: &str = "kind,structure,outcome_family,alpha,beta,variant,mode,split,n_ok,n_failed,\
eps_ate_mean,eps_ate_std,sqrt_pehe_mean,sqrt_pehe_std,pooled_r2_mean,pooled_r2_std,gc_mean,gc_std";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_COLUMNS}\n");
    for r in rows {
        let pair = |p: Option<(f64, f64)>| p.map_or(",".to_string(), |(m, s)| format!("{m},{s}"));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.kind,
            r.structure,
            r.outcome_family,
            r.alpha,
            r.beta,
            r.variant,
            r.mode.as_str(),
            r.split,
            r.n_ok,
            r.n_failed,
            pair(Some(r.eps_ate)),
            pair(Some(r.sqrt_pehe)),
            pair(r.pooled_r2),
            pair(r.group_consistency),
        ));
    }
    out
}

fn pm((m, s): (f64, f64)) -> String {
    format!("{m:.3} ± {s:.3}")
}

/// Mean ± standard deviation per group.
pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "| kind | structure | outcome | α | β | variant | mode | split | n | ε_ate | √ε_pehe | pooled R² | group consistency |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let o = |p: Option<(f64, f64)>| p.map_or_else(|| "".to_string(), pm);
        let n = if r.n_failed > 0 {
            format!("{} (+{} failed)", r.n_ok, r.n_failed)
        } else {
            r.n_ok.to_string()
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.kind,
            r.structure,
            r.outcome_family,
            r.alpha,
            r.beta,
            r.variant,
            r.mode.as_str(),
            r.split,
            n,
            pm(r.eps_ate),
            pm(r.sqrt_pehe),
            o(r.pooled_r2),
            o(r.group_consistency),
        ));
    }
    out
}

/// Published IHDP results of other estimators: (method, ε_ate within/out, √ε_pehe within/out).
const LITERATURE: [(&str, &str, &str); 6] = [
    ("TMLE", "NA / .30 ± .01", "NA / 5.0 ± .2"),
    ("BNN", ".42 ± .03 / .37 ± .03", "2.1 ± .1 / 2.2 ± .1"),
    ("CFR", ".27 ± .01 / .25 ± .01", ".76 ± .02 / .71 ± .02"),
    ("CF", ".40 ± .03 / .18 ± .01", "3.8 ± .2 / 3.8 ± .2"),
    ("CEVAE", ".46 ± .02 / .34 ± .01", "2.6 ± .1 / 2.7 ± .1"),
    ("GANITE", ".49 ± .05 / .43 ± .05", "2.4 ± .4 / 1.9 ± .4"),
];

/// IHDP errors per variant, within-sample (post-treatment, train+val) / out-of-sample
/// (pre-treatment, test), as mean ± standard error, followed by literature values.
pub fn ihdp_table(records: &[RunRecord]) -> String {
    let rows = summarize(records);
    let mut variants: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| r.kind == "ihdp") {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    let mut out = String::from("| method | ε_ate (within / out) | √ε_pehe (within / out) | n |\n|---|---|---|---|\n");
    for v in &variants {
        let find = |m: EffectMode| rows.iter().find(|r| r.kind == "ihdp" && &r.variant == v && r.mode == m);
        let cell = |f: &dyn Fn(&SummaryRow) -> (f64, f64)| {
            let one = |m: EffectMode| {
                find(m).map_or("NA".to_string(), |r| {
                    let p = f(r);
                    format!("{:.3} ± {:.3}", p.0, r.std_err(p))
                })
            };
            format!("{} / {}", one(EffectMode::Post), one(EffectMode::Pre))
        };
        let n = find(EffectMode::Pre).map_or(0, |r| r.n_ok);
        out.push_str(&format!(
            "| {v} (this run) | {} | {} | {n} |\n",
            cell(&|r| r.eps_ate),
            cell(&|r| r.sqrt_pehe)
        ));
    }
    for (m, ate, pehe) in LITERATURE {
        out.push_str(&format!("| {m} (literature) | {ate} | {pehe} | 1000 |\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Plots,
}

/// Which synthetic runs get scatter plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotRequest {
    All,
    Dgps(Vec<usize>),
    Runs(Vec<String>),
}

impl PlotRequest {
    fn wants(&self, r: &RunRecord) -> bool {
        match self {
            PlotRequest::All => true,
            PlotRequest::Dgps(d) => r.coords.dgp.is_some_and(|k| d.contains(&k)),
            PlotRequest::Runs(ids) => ids.contains(&r.run_id),
        }
    }
}

/// Scatter of a learned latent coordinate against the true latent, colored by treatment.
pub fn scatter_plot(rows: &[LatentRow], mode: EffectMode, coord: usize, title: &str, path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64, u8)> = rows
        .iter()
        .filter(|r| match mode {
            EffectMode::Pre => r.split == Split::Test,
            EffectMode::Post => r.split != Split::Test,
        })
        .filter_map(|r| {
            let z = match mode {
                EffectMode::Pre => r.z_pre.get(coord),
                EffectMode::Post => r.z_post.get(coord),
            };
            z.map(|&z| (r.z_true, z, r.t))
        })
        .collect();
    if pts.is_empty() {
        return Err(Error::InvalidArgument(format!("no latent rows to plot for {title}")));
    }
    let range = |f: &dyn Fn(&(f64, f64, u8)) -> f64| {
        let (lo, hi) = pts
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let pad = ((hi - lo) * 0.05).max(1e-6);
        (lo - pad)..(hi + pad)
    };
    let (xr, yr) = (range(&|p| p.0), range(&|p| p.1));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(xr, yr)?;
        chart
            .configure_mesh()
            .x_desc("true latent")
            .y_desc(format!("learned latent ({})", mode.as_str()))
            .draw()?;
        for (arm, color) in [(0u8, BLUE), (1u8, RED)] {
            chart
                .draw_series(
                    pts.iter()
                        .filter(|p| p.2 == arm)
                        .map(|p| Circle::new((p.0, p.1), 2, color.mix(0.6).filled())),
                )?
                .label(format!("t = {arm}"))
                .legend(move |(x, y)| Circle::new((x, y), 3, color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::format(path, format!("plot rendering failed: {e}")))
}

/// Renders the requested artifacts for `records.jsonl` into `out_dir`; returns the
/// written paths. Latent files are looked up next to the records file.
pub fn render_report(
    records_path: &Path,
    out_dir: &Path,
    formats: &[ReportFormat],
    plots: &PlotRequest,
) -> Result<Vec<PathBuf>> {
    let records = read_records(records_path)?;
    if records.is_empty() {
        return Err(Error::format(records_path, "no run records"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = summarize(&records);
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    if formats.contains(&ReportFormat::Csv) {
        put("summary_table.csv", summary_csv(&rows))?;
    }
    if formats.contains(&ReportFormat::Markdown) {
        let mut md = String::from("# Run summary\n\nMean ± standard deviation over DGPs or replications.\n\n");
        md.push_str(&summary_markdown(&rows));
        if records.iter().any(|r| r.kind == "ihdp") {
            md.push_str("\n## IHDP\n\nMean ± standard error.\n\n");
            md.push_str(&ihdp_table(&records));
        }
        put("summary.md", md)?;
    }
    if formats.contains(&ReportFormat::Plots) {
        let base = records_path.parent().unwrap_or(Path::new("."));
        for r in records.iter().filter(|r| r.kind == "synthetic" && r.is_ok() && plots.wants(r)) {
            let lat = latents_path(base, &r.run_id);
            let rows = read_latents(&lat)?;
            let slug = r.run_id.replace('/', "_");
            for mode in [EffectMode::Pre, EffectMode::Post] {
                let p = out_dir.join("plots").join(format!("{slug}_{}.svg", mode.as_str()));
                scatter_plot(&rows, mode, 0, &r.run_id, &p)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
