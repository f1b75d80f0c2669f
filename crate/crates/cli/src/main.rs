//! `intact`: run synthetic and IHDP sweeps, theory checks and reports.
//!
//! Every subcommand starts from a default configuration (or `--config FILE`), applies the
//! flags given on the command line, writes the effective configuration to
//! `<output>/config.json` and then runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use intact_core::experiments::{
    render_report, run_ihdp_suite, run_synthetic_suite, verify_identifiability, verify_theorem3, IhdpSource,
    IhdpVariant, NoisePoint, PlotRequest, PriorKind, ReportFormat, ScoreOutcome, SynthSweep, RECORDS_FILE,
};
use intact_core::ihdp::{generate_archive, write_csv_dir, write_npz, ENV_VAR};
use intact_core::nn::Activation;
use intact_core::{ExperimentConfig, ExperimentKind, OutcomeFamily, Structure};
use serde::de::DeserializeOwned;

#[derive(Parser, Debug)]
#[command(name = "intact", version, about = "Treatment-effect estimation with an identifiable conditional VAE")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic sweeps.
    Synth {
        #[command(subcommand)]
        action: SynthAction,
    },
    /// IHDP benchmark replications.
    Ihdp {
        #[command(subcommand)]
        action: IhdpAction,
    },
    /// Theory checks.
    Verify {
        #[command(subcommand)]
        action: VerifyAction,
    },
    /// Summary tables and latent plots from a records file.
    Report(ReportArgs),
    /// Print the default configuration of an experiment kind as JSON.
    Config {
        #[arg(value_enum)]
        kind: ConfigKind,
    },
}

#[derive(Subcommand, Debug)]
enum SynthAction {
    /// Train and evaluate over a grid of synthetic DGPs.
    Run(SynthArgs),
}

#[derive(Subcommand, Debug)]
enum IhdpAction {
    /// Train and evaluate both model variants on each replication.
    Run(IhdpArgs),
    /// Write replications with regenerated outcomes over the bundled covariates.
    Generate(GenerateArgs),
}

#[derive(Subcommand, Debug)]
enum VerifyAction {
    /// Affine identifiability of the learned latent across initializations.
    Ident(IdentArgs),
    /// Score recovery and CATE identification with a degenerate prior.
    Thm3(Thm3Args),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ConfigKind {
    Synthetic,
    Ihdp,
    VerifyIdentifiability,
    VerifyTheorem3,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum ArchiveFormat {
    Npz,
    Csv,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Monte-Carlo draws per unit for effect estimation.
    #[arg(long)]
    estimate_samples: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct ModelFlags {
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Hidden layer widths, e.g. `200,200,200`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// relu, tanh or identity.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    balanced_prior: Option<bool>,
    #[arg(long)]
    degenerate_prior: Option<bool>,
    #[arg(long)]
    separate_heads: Option<bool>,
    #[arg(long)]
    learn_outcome_noise: Option<bool>,
    #[arg(long)]
    outcome_var: Option<f64>,
    #[arg(long)]
    var_floor: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Weight of the Sinkhorn balancing penalty.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sinkhorn_epsilon: Option<f64>,
    #[arg(long)]
    sinkhorn_max_iters: Option<usize>,
    #[arg(long)]
    sinkhorn_tol: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// unconfounded, proxy, iv.
    #[arg(long, value_delimiter = ',')]
    structures: Option<Vec<String>>,
    /// linear, nonlinear.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    /// Outcome-noise levels; crossed with `--beta`.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Proxy-noise levels; crossed with `--alpha`.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    /// Vary one noise level over these values with the other fixed at 0.2.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["alpha", "beta"])]
    noise_grid: Option<Vec<f64>>,
    #[arg(long)]
    n_dgps: Option<usize>,
    #[arg(long)]
    first_dgp: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    /// balanced, conditional.
    #[arg(long, value_delimiter = ',')]
    priors: Option<Vec<String>>,
    #[arg(long)]
    normalize_ate: Option<bool>,
    #[arg(long)]
    save_latents: Option<bool>,
}

#[derive(Args, Debug)]
struct IhdpArgs {
    #[command(flatten)]
    common: Common,
    /// Replication archive (NPZ file or directory of CSV files); defaults to $IHDP_DATA,
    /// then to regenerated outcomes.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    first_replication: Option<usize>,
    /// plain, modified.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Seed of regenerated outcomes when no archive is found.
    #[arg(long)]
    generated_seed: Option<u64>,
    #[arg(long)]
    standardize_outcome: Option<bool>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// NPZ file or CSV directory to write.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "npz")]
    format: ArchiveFormat,
}

#[derive(Args, Debug)]
struct IdentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    structure: Option<String>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    n_dgps: Option<usize>,
    #[arg(long)]
    first_dgp: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    conditional_contrast: Option<bool>,
}

#[derive(Args, Debug)]
struct Thm3Args {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Three coefficients of the linear score.
    #[arg(long, value_delimiter = ',')]
    score_coef: Option<Vec<f64>>,
    /// linear, null, nonlinear.
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    r2_threshold: Option<f64>,
    #[arg(long)]
    rmse_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// `records.jsonl`, or a directory containing one.
    records: PathBuf,
    /// Output directory (default: `<records dir>/report`).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// csv, markdown, plots.
    #[arg(long, value_delimiter = ',', default_value = "csv,markdown")]
    format: Vec<String>,
    /// Plot only these DGP indices.
    #[arg(long, value_delimiter = ',', conflicts_with = "plot_runs")]
    plot_dgps: Option<Vec<usize>>,
    /// Plot only these run ids.
    #[arg(long, value_delimiter = ',')]
    plot_runs: Option<Vec<String>>,
}

fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_lowercase()))
        .with_context(|| format!("unknown {what} `{s}`"))
}

fn parse_all<T: DeserializeOwned>(what: &str, v: &[String]) -> Result<Vec<T>> {
    v.iter().map(|s| parse_enum(what, s)).collect()
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Common {
    fn base(&self, default: ExperimentConfig) -> Result<ExperimentConfig> {
        let Some(p) = &self.config else {
            return Ok(default);
        };
        let cfg = ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?;
        if std::mem::discriminant(&cfg.experiment) != std::mem::discriminant(&default.experiment) {
            bail!(
                "{} describes a `{}` experiment, expected `{}`",
                p.display(),
                cfg.experiment.name(),
                default.experiment.name()
            );
        }
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        set(&mut cfg.output_dir, self.output.clone());
        set(&mut cfg.master_seed, self.master_seed);
        set(&mut cfg.workers, self.workers);
        set(&mut cfg.estimate_samples, self.estimate_samples);
        let m = &self.model;
        let mc = &mut cfg.model;
        set(&mut mc.latent_dim, m.latent_dim);
        set(&mut mc.hidden, m.hidden.clone());
        if let Some(a) = &m.activation {
            mc.activation = parse_enum::<Activation>("activation", a)?;
        }
        set(&mut mc.balanced_prior, m.balanced_prior);
        set(&mut mc.degenerate_prior, m.degenerate_prior);
        set(&mut mc.separate_decoder_heads, m.separate_heads);
        set(&mut mc.learn_outcome_noise, m.learn_outcome_noise);
        set(&mut mc.outcome_var, m.outcome_var);
        set(&mut mc.var_floor, m.var_floor);
        let t = &self.train;
        let tc = &mut cfg.train;
        set(&mut tc.learning_rate, t.learning_rate);
        set(&mut tc.batch_size, t.batch_size);
        set(&mut tc.max_epochs, t.max_epochs);
        set(&mut tc.patience, t.patience);
        set(&mut tc.balance_gamma, t.gamma);
        set(&mut tc.sinkhorn_epsilon, t.sinkhorn_epsilon);
        set(&mut tc.sinkhorn_max_iters, t.sinkhorn_max_iters);
        set(&mut tc.sinkhorn_tol, t.sinkhorn_tol);
        set(&mut tc.clip_norm, t.clip_norm);
        Ok(())
    }

    /// Validates, then prints (dry run) or persists the configuration. Returns false on a
    /// dry run.
    fn finish(&self, cfg: &ExperimentConfig) -> Result<bool> {
        cfg.validate()?;
        if self.dry_run {
            println!("{}", serde_json::to_string_pretty(cfg)?);
            return Ok(false);
        }
        std::fs::create_dir_all(&cfg.output_dir)
            .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
        cfg.save(&cfg.output_dir.join("config.json"))?;
        log::info!("config {} -> {}", cfg.hash(), cfg.output_dir.display());
        Ok(true)
    }
}

fn synth_config(a: &SynthArgs) -> Result<ExperimentConfig> {
    let mut cfg = a.common.base(ExperimentConfig::synthetic())?;
    a.common.apply(&mut cfg)?;
    let ExperimentKind::Synthetic(s) = &mut cfg.experiment else { unreachable!() };
    if let Some(v) = &a.structures {
        s.structures = parse_all::<Structure>("structure", v)?;
    }
    if let Some(v) = &a.families {
        s.outcome_families = parse_all::<OutcomeFamily>("outcome family", v)?;
    }
    if let Some(levels) = &a.noise_grid {
        s.noise_points = SynthSweep::noise_grid(levels);
    } else if a.alpha.is_some() || a.beta.is_some() {
        let alphas = a.alpha.clone().unwrap_or_else(|| vec![0.2]);
        let betas = a.beta.clone().unwrap_or_else(|| vec![0.2]);
        s.noise_points = alphas
            .iter()
            .flat_map(|&alpha| betas.iter().map(move |&beta| NoisePoint { alpha, beta }))
            .collect();
    }
    set(&mut s.n_dgps, a.n_dgps);
    set(&mut s.first_dgp, a.first_dgp);
    set(&mut s.n_samples, a.n_samples);
    if let Some(v) = &a.priors {
        s.priors = parse_all::<PriorKind>("prior", v)?;
    }
    set(&mut s.normalize_ate, a.normalize_ate);
    set(&mut s.save_latents, a.save_latents);
    Ok(cfg)
}

fn ihdp_config(a: &IhdpArgs) -> Result<ExperimentConfig> {
    let mut cfg = a.common.base(ExperimentConfig::ihdp())?;
    a.common.apply(&mut cfg)?;
    let ExperimentKind::Ihdp(s) = &mut cfg.experiment else { unreachable!() };
    if a.data.is_some() {
        s.archive = a.data.clone();
    }
    set(&mut s.n_replications, a.replications);
    set(&mut s.first_replication, a.first_replication);
    if let Some(v) = &a.variants {
        s.variants = v
            .iter()
            .map(|name| match name.trim() {
                "plain" => Ok(IhdpVariant::plain()),
                "modified" => Ok(IhdpVariant::modified()),
                other => bail!("unknown variant `{other}` (plain, modified)"),
            })
            .collect::<Result<_>>()?;
    }
    if let Some(g) = a.common.train.gamma {
        for v in s.variants.iter_mut().filter(|v| v.balance_gamma > 0.0) {
            v.balance_gamma = g;
        }
    }
    set(&mut s.generated_seed, a.generated_seed);
    set(&mut s.standardize_outcome, a.standardize_outcome);
    Ok(cfg)
}

fn ident_config(a: &IdentArgs) -> Result<ExperimentConfig> {
    let mut cfg = a.common.base(ExperimentConfig::identifiability())?;
    a.common.apply(&mut cfg)?;
    let ExperimentKind::VerifyIdentifiability(s) = &mut cfg.experiment else { unreachable!() };
    if let Some(v) = &a.structure {
        s.structure = parse_enum("structure", v)?;
    }
    if let Some(v) = &a.family {
        s.outcome_family = parse_enum("outcome family", v)?;
    }
    set(&mut s.alpha, a.alpha);
    set(&mut s.beta, a.beta);
    set(&mut s.n_dgps, a.n_dgps);
    set(&mut s.first_dgp, a.first_dgp);
    set(&mut s.n_samples, a.n_samples);
    set(&mut s.threshold, a.threshold);
    set(&mut s.conditional_contrast, a.conditional_contrast);
    Ok(cfg)
}

fn thm3_config(a: &Thm3Args) -> Result<ExperimentConfig> {
    let mut cfg = a.common.base(ExperimentConfig::theorem3())?;
    a.common.apply(&mut cfg)?;
    let ExperimentKind::VerifyTheorem3(s) = &mut cfg.experiment else { unreachable!() };
    set(&mut s.n_train, a.n_train);
    set(&mut s.n_val, a.n_val);
    set(&mut s.n_test, a.n_test);
    if let Some(c) = &a.score_coef {
        s.score_coef = c
            .as_slice()
            .try_into()
            .map_err(|_| anyhow::anyhow!("--score-coef takes exactly 3 values"))?;
    }
    if let Some(o) = &a.outcome {
        s.outcome = parse_enum::<ScoreOutcome>("outcome", o)?;
    }
    if let Some(sd) = a.noise_sd {
        s.noise_sd = sd;
        if a.common.model.outcome_var.is_none() {
            cfg.model.outcome_var = (sd * sd).max(cfg.model.var_floor);
        }
    }
    set(&mut s.r2_threshold, a.r2_threshold);
    set(&mut s.rmse_threshold, a.rmse_threshold);
    Ok(cfg)
}

fn print_records(records: &[intact_core::RunRecord]) {
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    for r in records {
        let metrics: Vec<String> = r
            .reports
            .iter()
            .map(|e| format!("{} ate {:.4} pehe {:.4}", e.mode.as_str(), e.eps_ate, e.sqrt_pehe))
            .collect();
        match &r.error {
            Some(e) => println!("{}  FAILED: {e}", r.run_id),
            None => println!("{}  {}", r.run_id, metrics.join("  ")),
        }
    }
    println!("{} runs, {failed} failed", records.len());
}

fn report(a: &ReportArgs) -> Result<()> {
    let records = if a.records.is_dir() {
        a.records.join(RECORDS_FILE)
    } else {
        a.records.clone()
    };
    let out = a.output.clone().unwrap_or_else(|| {
        records.parent().unwrap_or(Path::new(".")).join("report")
    });
    let formats: Vec<ReportFormat> = parse_all("report format", &a.format)?;
    let plots = match (&a.plot_dgps, &a.plot_runs) {
        (Some(d), _) => PlotRequest::Dgps(d.clone()),
        (_, Some(r)) => PlotRequest::Runs(r.clone()),
        _ => PlotRequest::All,
    };
    for p in render_report(&records, &out, &formats, &plots)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let reps = generate_archive(a.seed, a.count)?;
    match a.format {
        ArchiveFormat::Npz => write_npz(&a.output, &reps)?,
        ArchiveFormat::Csv => write_csv_dir(&a.output, &reps)?,
    }
    println!("wrote {} replications to {}", a.count, a.output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { action: SynthAction::Run(a) } => {
            let cfg = synth_config(&a)?;
            if a.common.finish(&cfg)? {
                print_records(&run_synthetic_suite(&cfg)?);
            }
        }
        Command::Ihdp { action: IhdpAction::Run(a) } => {
            let cfg = ihdp_config(&a)?;
            if a.common.finish(&cfg)? {
                let ExperimentKind::Ihdp(s) = &cfg.experiment else { unreachable!() };
                let source = IhdpSource::resolve(s)?;
                if matches!(source, IhdpSource::Generated { .. }) {
                    log::warn!("no archive given and {ENV_VAR} unset; using regenerated outcomes");
                }
                print_records(&run_ihdp_suite(&cfg, &source)?);
            }
        }
        Command::Ihdp { action: IhdpAction::Generate(a) } => generate(&a)?,
        Command::Verify { action: VerifyAction::Ident(a) } => {
            let cfg = ident_config(&a)?;
            if a.common.finish(&cfg)? {
                let rep = verify_identifiability(&cfg)?;
                println!("{}", serde_json::to_string_pretty(&rep)?);
                println!("identifiability: {}", if rep.passed { "PASS" } else { "FAIL" });
            }
        }
        Command::Verify { action: VerifyAction::Thm3(a) } => {
            let cfg = thm3_config(&a)?;
            if a.common.finish(&cfg)? {
                let rep = verify_theorem3(&cfg)?;
                println!("{}", serde_json::to_string_pretty(&rep)?);
                println!("score recovery: {}", if rep.passed { "PASS" } else { "FAIL" });
            }
        }
        Command::Report(a) => report(&a)?,
        Command::Config { kind } => {
            let cfg = match kind {
                ConfigKind::Synthetic => ExperimentConfig::synthetic(),
                ConfigKind::Ihdp => ExperimentConfig::ihdp(),
                ConfigKind::VerifyIdentifiability => ExperimentConfig::identifiability(),
                ConfigKind::VerifyTheorem3 => ExperimentConfig::theorem3(),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp_secs()
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
