//! End-to-end checks of the `skymask` binary.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skymask"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("skymask-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const QUICK_CONFIG: &str = "\
dataset.train_n = 400
dataset.test_n = 200
partition.clients = 6
fl.rounds = 2
fl.local_iters = 2
defense.kind = skymask-nr
attack.kind = fang-trim
";

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let dir = temp_dir("run");
    let cfg_path = dir.join("exp.cfg");
    fs::write(&cfg_path, QUICK_CONFIG).unwrap();
    let out_dir = dir.join("out");

    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "9", "--out"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_dir.join("rounds.csv").exists());
    assert!(out_dir.join("summary.json").exists());
    assert!(out_dir.join("pca_round_0.csv").exists());
    assert!(out_dir.join("mask_layers_round_1.csv").exists());

    let summary = fs::read_to_string(out_dir.join("summary.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(parsed["config"]["seed"].as_u64(), Some(9));
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_creates_one_directory_per_value() {
    let dir = temp_dir("sweep");
    let cfg_path = dir.join("exp.cfg");
    fs::write(&cfg_path, QUICK_CONFIG).unwrap();
    let out_dir = dir.join("sweep-out");

    let status = bin()
        .args(["sweep", "--config"])
        .arg(&cfg_path)
        .args(["--param", "attack.fraction", "--values", "0.2,0.4", "--out"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    for value in ["0.2", "0.4"] {
        let sub = out_dir.join(format!("attack.fraction={value}"));
        assert!(sub.join("rounds.csv").exists(), "missing {}", sub.display());
    }
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn invalid_config_key_fails_with_message() {
    let dir = temp_dir("bad");
    let cfg_path = dir.join("exp.cfg");
    fs::write(&cfg_path, "attack.fraction = 2.0\n").unwrap();

    let output = bin()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("attack.fraction"), "stderr: {stderr}");
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_subcommand_exits_with_usage() {
    let output = bin().output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("USAGE"));
}
