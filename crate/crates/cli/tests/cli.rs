use std::path::Path;

use assert_cmd::Command;
use intact_core::experiments::{read_records, RECORDS_FILE};
use intact_core::ExperimentConfig;

fn intact() -> Command {
    let mut c = Command::cargo_bin("intact").unwrap();
    c.env_remove("IHDP_DATA").arg("--log").arg("error");
    c
}

const TINY: [&str; 8] = ["--hidden", "8", "--max-epochs", "2", "--estimate-samples", "3", "--learning-rate", "1e-3"];

fn stdout(c: &mut Command) -> String {
    let out = c.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn metrics(dir: &Path) -> Vec<(String, f64, f64)> {
    read_records(&dir.join(RECORDS_FILE))
        .unwrap()
        .iter()
        .flat_map(|r| r.reports.iter().map(|e| (r.run_id.clone(), e.eps_ate, e.sqrt_pehe)))
        .collect()
}

#[test]
fn default_configs_parse() {
    for kind in ["synthetic", "ihdp", "verify-identifiability", "verify-theorem3"] {
        let s = stdout(intact().args(["config", kind]));
        let cfg: ExperimentConfig = serde_json::from_str(&s).unwrap();
        cfg.validate().unwrap();
    }
}

#[test]
fn synth_run_then_replay_from_saved_config() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let out = stdout(
        intact()
            .args(["synth", "run", "-o"])
            .arg(&first)
            .args(TINY)
            .args(["--n-dgps", "2", "--n-samples", "90", "--structures", "iv", "--families", "nonlinear", "--priors", "balanced", "--save-latents", "true", "--alpha", "0.1", "--beta", "0.3"]),
    );
    assert!(out.contains("synthetic/iv/nonlinear/a0.1-b0.3/balanced/dgp001"));
    assert!(out.contains("2 runs, 0 failed"));
    let cfg = ExperimentConfig::load(&first.join("config.json")).unwrap();
    assert_eq!(cfg.train.max_epochs, 2);

    let second = dir.path().join("b");
    stdout(intact().args(["synth", "run", "--config"]).arg(first.join("config.json")).arg("-o").arg(&second));
    assert_eq!(metrics(&first), metrics(&second));

    let files = stdout(intact().arg("report").arg(&first).args(["--format", "csv,markdown,plots", "--plot-dgps", "1"]));
    assert!(files.contains("summary_table.csv"));
    assert!(files.contains("summary.md"));
    assert_eq!(files.lines().filter(|l| l.ends_with(".svg")).count(), 2);
}

#[test]
fn noise_grid_expands_to_one_axis_at_a_time() {
    let s = stdout(intact().args(["synth", "run", "--dry-run", "--noise-grid", "0.1,0.2,0.4"]));
    let cfg: ExperimentConfig = serde_json::from_str(&s).unwrap();
    let v = serde_json::to_value(&cfg.experiment).unwrap();
    assert_eq!(v["noise_points"].as_array().unwrap().len(), 5);
}

#[test]
fn ihdp_generate_and_run_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("csv");
    stdout(intact().args(["ihdp", "generate", "--count", "2", "--format", "csv", "-o"]).arg(&data));
    assert!(data.join("ihdp_npci_2.csv").exists());
    let out_dir = dir.path().join("run");
    let out = stdout(
        intact()
            .env("IHDP_DATA", &data)
            .args(["ihdp", "run", "--replications", "2", "--variants", "modified", "-o"])
            .arg(&out_dir)
            .args(TINY),
    );
    assert!(out.contains("ihdp/modified/rep0001"));
    assert!(out.contains("2 runs, 0 failed"));

    // too many replications for the archive
    intact()
        .env("IHDP_DATA", &data)
        .args(["ihdp", "run", "--replications", "3", "-o"])
        .arg(dir.path().join("x"))
        .assert()
        .failure();
}

#[test]
fn verify_commands_print_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(
        intact()
            .args(["verify", "thm3", "-o"])
            .arg(dir.path().join("t"))
            .args(TINY)
            .args(["--n-train", "200", "--n-val", "60", "--n-test", "60", "--outcome", "null"]),
    );
    assert!(out.contains("score recovery: "));
    assert!(dir.path().join("t/theorem3_report.json").exists());
    let out = stdout(
        intact()
            .args(["verify", "ident", "-o"])
            .arg(dir.path().join("i"))
            .args(TINY)
            .args(["--n-samples", "90", "--n-dgps", "2", "--conditional-contrast", "false"]),
    );
    assert!(out.contains("identifiability: "));
}

#[test]
fn bad_input_is_reported() {
    let assert = intact().args(["synth", "run", "--dry-run", "--structures", "mediator"]).assert().failure();
    let err = String::from_utf8(assert.get_output().stderr.clone()).unwrap();
    assert!(err.contains("unknown structure `mediator`"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ihdp.json");
    std::fs::write(&p, serde_json::to_string(&ExperimentConfig::ihdp()).unwrap()).unwrap();
    let assert = intact().args(["synth", "run", "--dry-run", "--config"]).arg(&p).assert().failure();
    let err = String::from_utf8(assert.get_output().stderr.clone()).unwrap();
    assert!(err.contains("expected `synthetic`"), "{err}");

    intact().arg("report").arg(dir.path().join("missing.jsonl")).assert().failure();
    intact().args(["verify", "thm3", "--dry-run", "--latent-dim", "2"]).assert().failure();
}
