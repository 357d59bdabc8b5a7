//! End-to-end runs of the `earlydet` binary on a tiny benchmark.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "seed": 3,
  "paths": { "out_dir": "." },
  "synth": { "train_streams": 2, "test_streams": 1, "stream_seconds": 8.0, "events_per_class": 1 },
  "train": { "dnn1_epochs": 1, "dnn2_epochs": 1 }
}"#;

fn small_run() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn earlydet(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earlydet"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(cfg: &Path, args: &[&str]) {
    let out = earlydet(cfg, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let (dir, cfg) = small_run();
    let root = dir.path();
    for step in ["synth", "train", "calibrate", "evaluate", "curves", "detect"] {
        ok(&cfg, &[step]);
    }
    for file in [
        "data/manifest.json",
        "data/audio/train_000.wav",
        "data/audio/test_000.wav",
        "model.bin",
        "training_log.csv",
        "thresholds.json",
        "metrics.json",
        "metrics.csv",
        "curves.csv",
        "detections.csv",
        "tracks/stream_000.csv",
    ] {
        assert!(root.join(file).exists(), "missing {file}");
    }

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("metrics.json")).unwrap()).unwrap();
    let f1 = metrics["overall"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    let hash = metrics["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 16);
    assert_eq!(metrics["per_class"].as_array().unwrap().len(), 5);

    let log = std::fs::read_to_string(root.join("training_log.csv")).unwrap();
    assert!(log.starts_with(&format!("# config_hash {hash}")));
    assert_eq!(log.lines().filter(|l| l.starts_with("dnn")).count(), 2);
    let curves = std::fs::read_to_string(root.join("curves.csv")).unwrap();
    assert!(curves.contains(hash));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (a, cfg_a) = small_run();
    let (b, cfg_b) = small_run();
    for cfg in [&cfg_a, &cfg_b] {
        ok(cfg, &["synth"]);
        ok(cfg, &["train"]);
    }
    let model = |d: &TempDir| std::fs::read(d.path().join("model.bin")).unwrap();
    assert_eq!(model(&a), model(&b));
    let wav = |d: &TempDir| std::fs::read(d.path().join("data/audio/test_000.wav")).unwrap();
    assert_eq!(wav(&a), wav(&b));
}

#[test]
fn invalid_configuration_exits_with_2() {
    let (dir, cfg) = small_run();
    let out = earlydet(&cfg, &["--set", "weighted_loss.lambda_fg=-1", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weighted_loss.lambda_fg"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    assert_eq!(earlydet(&bad, &["synth"]).status.code(), Some(2));
    assert_eq!(earlydet(&cfg, &["--set", "train.nope=1", "synth"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_3() {
    let (dir, cfg) = small_run();
    assert_eq!(earlydet(&cfg, &["train"]).status.code(), Some(3));
    assert_eq!(earlydet(&cfg, &["evaluate"]).status.code(), Some(3));
    let absent = dir.path().join("absent.json");
    assert_eq!(earlydet(&absent, &["synth"]).status.code(), Some(3));
}

#[test]
fn gradient_check_passes_and_reports() {
    let (dir, cfg) = small_run();
    ok(&cfg, &["check-gradients", "--seeds", "3"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradient_check.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["passed"], true);
    assert!(report["report"]["max_rel_error"].as_f64().unwrap() < 1e-5);
}
