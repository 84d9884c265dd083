use std::fs;
use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use entroshape::gradients::variant_gradient;
use entroshape::kernel::Reduction;
use entroshape_cli::commands::run_with;
use entroshape_cli::manifest::{sha256_file, Manifest};
use entroshape_cli::{run, Cli, CliError};
use tempfile::TempDir;

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("entroshape").chain(args.iter().copied())).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, json).unwrap();
    path(&p).to_string()
}

fn binary(args: &[&str]) -> i32 {
    Process::new(env!("CARGO_BIN_EXE_entroshape"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

const SMALL_GRID: &str = r#"{"grad_check": {"sizes": [4, 8], "dims": [1, 2], "sigmas": [0.5, 1.0], "instances": 1}}"#;

const SHORT_TRAIN: &str = r#"{"train": {"steps": 120, "snapshot_every": 40}, "loss": {"alpha": 0.1}}"#;

#[test]
fn grad_check_passes_and_manifest_digests_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_GRID);
    let out = tmp.path().join("gc");
    let outcome = run(&cli(&["grad-check", "--config", &cfg, "--out", path(&out)])).unwrap();
    let rows = fs::read_to_string(out.join("grad_check.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 8);
    assert!(rows.lines().skip(1).all(|l| l.ends_with(",true")));
    let manifest = Manifest::read(&out).unwrap();
    assert_eq!(manifest.command, "grad-check");
    assert_eq!(manifest.outputs.len(), 1);
    assert_eq!(manifest.outputs[0].path, "grad_check.csv");
    assert_eq!(
        manifest.outputs[0].sha256,
        sha256_file(&out.join("grad_check.csv")).unwrap()
    );
    assert_eq!(outcome.manifest, out.join("manifest.json"));
}

#[test]
fn flipped_gradient_fails_verification_and_dumps_instances() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_GRID);
    let out = tmp.path().join("gc");
    let flipped = |e: &_, loss: &_| variant_gradient(e, loss, Reduction::Deterministic).map(|g| g.scaled(-1.0));
    let err = run_with(&cli(&["grad-check", "--config", &cfg, "--out", path(&out)]), &flipped).unwrap_err();
    assert!(matches!(err, CliError::Verification(_)));
    assert_eq!(err.exit_code(), 2);
    let dumped = fs::read_dir(out.join("failures")).unwrap().count();
    assert_eq!(dumped, 24);
    assert!(Manifest::read(&out).unwrap().outputs.len() > 1);
}

#[test]
fn empty_grid_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"grad_check": {"sizes": []}}"#);
    let err = run(&cli(&[
        "grad-check",
        "--config",
        &cfg,
        "--out",
        path(&tmp.path().join("o")),
    ]))
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let cfg = write_config(tmp.path(), r#"{"grad_check": {"instances": 0}}"#);
    let err = run(&cli(&[
        "grad-check",
        "--config",
        &cfg,
        "--out",
        path(&tmp.path().join("o")),
    ]))
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn binary_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let out = path(&tmp.path().join("o")).to_string();
    let bad = write_config(tmp.path(), r#"{"trian": {}}"#);
    assert_eq!(binary(&["train", "--config", &bad, "--out", &out]), 1);
    assert_eq!(binary(&["train", "--config", "/nonexistent/config.json"]), 1);
    let diverge = write_config(
        tmp.path(),
        r#"{"train": {"steps": 400, "learning_rate": 1000.0}, "loss": {"alpha": 0.0}}"#,
    );
    assert_eq!(binary(&["train", "--config", &diverge, "--out", &out]), 3);
    let ok = write_config(tmp.path(), r#"{"influence": {"cs": [0.5, 1.0, 2.0]}}"#);
    assert_eq!(binary(&["influence", "--config", &ok, "--out", &out]), 0);
    assert_eq!(binary(&["influence", "--threads", "0", "--out", &out]), 1);
}

#[test]
fn train_is_reproducible_and_hash_ignores_output_dir() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SHORT_TRAIN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cli(&["train", "--config", &cfg, "--out", path(&a), "--seed", "5"])).unwrap();
    run(&cli(&["train", "--config", &cfg, "--out", path(&b), "--seed", "5"])).unwrap();
    let (ma, mb) = (Manifest::read(&a).unwrap(), Manifest::read(&b).unwrap());
    assert_eq!(ma, mb);
    assert_eq!(ma.seed, 5);
    assert!(ma.outputs.iter().any(|o| o.path == "snapshots/step_000040.csv"));
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );

    let c = tmp.path().join("c");
    run(&cli(&["train", "--config", &cfg, "--out", path(&c), "--seed", "6"])).unwrap();
    let mc = Manifest::read(&c).unwrap();
    assert_ne!(ma.config_hash, mc.config_hash);
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(c.join("metrics.csv")).unwrap()
    );
}

#[test]
fn entropy_curve_reproduces_then_flags_tampering() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SHORT_TRAIN);
    let run_dir = tmp.path().join("run");
    run(&cli(&["train", "--config", &cfg, "--out", path(&run_dir)])).unwrap();
    let out = tmp.path().join("curve");
    run(&cli(&["entropy-curve", "--run", path(&run_dir), "--out", path(&out)])).unwrap();
    let curve = fs::read_to_string(out.join("entropy_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4);

    let metrics = run_dir.join("metrics.csv");
    let text = fs::read_to_string(&metrics).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let row = lines.iter().position(|l| l.starts_with("40,")).unwrap();
    let mut fields: Vec<String> = lines[row].split(',').map(String::from).collect();
    let entropy = fields.len() - 2;
    let v: f64 = fields[entropy].parse().unwrap();
    fields[entropy] = (v + 1e-9).to_string();
    lines[row] = fields.join(",");
    fs::write(&metrics, lines.join("\n") + "\n").unwrap();
    let err = run(&cli(&["entropy-curve", "--run", path(&run_dir), "--out", path(&out)])).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn pca_filters_by_task_and_rejects_too_many_components() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"task": {"name": "paired", "trajectories": 3, "minority": 1, "horizon": 8, "chunk": 2},
            "train": {"steps": 60, "snapshot_every": 30}}"#,
    );
    let run_dir = tmp.path().join("run");
    run(&cli(&["train", "--config", &cfg, "--out", path(&run_dir)])).unwrap();
    let all = tmp.path().join("all");
    run(&cli(&["pca", "--run", path(&run_dir), "--out", path(&all)])).unwrap();
    let b = tmp.path().join("b");
    run(&cli(&[
        "pca",
        "--run",
        path(&run_dir),
        "--task",
        "B",
        "--out",
        path(&b),
    ]))
    .unwrap();
    let count = |d: &Path| fs::read_to_string(d.join("pca.csv")).unwrap().lines().count() - 1;
    assert_eq!(count(&all), 4 * 8 * 2);
    assert_eq!(count(&b), 8 * 2);
    let err = run(&cli(&[
        "pca",
        "--run",
        path(&run_dir),
        "--components",
        "3",
        "--out",
        path(&b),
    ]))
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let err = run(&cli(&["pca", "--out", path(&b)])).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn pca_reads_a_plain_error_csv() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("errors.csv");
    let set =
        entroshape::ErrorSet::new(vec![vec![0.0, 0.0], vec![2.0, 0.1], vec![-2.0, -0.1], vec![0.0, 0.2]]).unwrap();
    set.save_csv(&input).unwrap();
    let out = tmp.path().join("p");
    run(&cli(&[
        "pca",
        "--input",
        path(&input),
        "--components",
        "1",
        "--out",
        path(&out),
    ]))
    .unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("pca_summary.json")).unwrap()).unwrap();
    assert!(summary["explained"][0].as_f64().unwrap() > 0.9);
}

#[test]
fn deterministic_flag_changes_the_hash() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"influence": {"cs": [1.0]}}"#);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cli(&["influence", "--config", &cfg, "--out", path(&a)])).unwrap();
    run(&cli(&[
        "influence",
        "--config",
        &cfg,
        "--out",
        path(&b),
        "--deterministic",
        "false",
    ]))
    .unwrap();
    let (ma, mb) = (Manifest::read(&a).unwrap(), Manifest::read(&b).unwrap());
    assert!(ma.deterministic && !mb.deterministic);
    assert_ne!(ma.config_hash, mb.config_hash);
}
