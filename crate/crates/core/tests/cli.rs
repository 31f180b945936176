//! End-to-end checks of the command-line surface, driving the real binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridswitch"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn enumerate_prints_verified_counts() {
    let out = bin()
        .args(["enumerate"])
        .arg(config("fourdg_default.toml"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("root 1: 16 arborescences"), "{stdout}");
    assert!(stdout.contains("64 candidates"), "{stdout}");
}

#[test]
fn enumerate_dump_writes_tree_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["enumerate"])
        .arg(config("fourdg_default.toml"))
        .args(["--dump", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let dump: serde_json::Value =
        serde_json::from_reader(std::fs::File::open(dir.path().join("fourdg_default_trees.json")).unwrap())
            .unwrap();
    assert_eq!(dump["count"], 64);
    assert_eq!(dump["trees"][0]["root"], 1);
    assert_eq!(dump["trees"][0]["edges"][0][0], 1);
}

#[test]
fn gen_data_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen-data"])
        .arg(config("fourdg_default.toml"))
        .args(["--rows", "200", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("fourdg_default_snr-inf_data.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("f0,f1,"));
    assert!(header.ends_with("f48,target"));
    assert_eq!(csv.lines().count(), 201);
    let sidecar: serde_json::Value = serde_json::from_reader(
        std::fs::File::open(dir.path().join("fourdg_default_snr-inf_data.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(sidecar["provenance"]["n_dg"], 4);
    assert_eq!(sidecar["rows"], 200);
}

#[test]
fn run_case_analytic_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run-case"])
        .arg(config("fourdg_fdi.toml"))
        .args(["--analytic", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_reader(
        std::fs::File::open(dir.path().join("fourdg_fdi_analytic_mitigated_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["mitigation"], true);
    assert_eq!(report["triggers"].as_array().unwrap().len(), 1);
    let csv =
        std::fs::read_to_string(dir.path().join("fourdg_fdi_analytic_mitigated_trajectory.csv"))
            .unwrap();
    assert!(csv.lines().next().unwrap().ends_with("active_tree_index"));
    // The tree column switches away from the default topology after t_a.
    assert!(csv.lines().next_back().unwrap().split(',').next_back() != Some("0"));
}

#[test]
fn run_case_without_detector_choice_fails_with_machine_readable_error() {
    let out = bin()
        .args(["run-case"])
        .arg(config("fourdg_fdi.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("--model"));
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["gen-data"])
        .arg(config("fourdg_default.toml"))
        .args(["--rows", "2000", "--out-dir"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let data = dir.path().join("fourdg_default_snr-inf_data.csv");
    let out = bin()
        .args(["train"])
        .arg(config("fourdg_default.toml"))
        .args(["--data"])
        .arg(&data)
        .args(["--epochs", "30", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = dir.path().join("fourdg_default_model.json");
    let eval = bin()
        .args(["evaluate", "--data"])
        .arg(&data)
        .args(["--model"])
        .arg(&model)
        .output()
        .unwrap();
    assert!(eval.status.success());
    let metrics: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&eval.stdout).trim()).unwrap();
    assert!(metrics["mae"].as_f64().unwrap().is_finite());
    assert_eq!(metrics["rows"], 2000);
    // Training report exists and satisfies the RMSE identity.
    let report: serde_json::Value = serde_json::from_reader(
        std::fs::File::open(dir.path().join("fourdg_default_train_report.json")).unwrap(),
    )
    .unwrap();
    let mse = report["test"]["mse"].as_f64().unwrap();
    let rmse = report["test"]["rmse"].as_f64().unwrap();
    assert!((rmse * rmse - mse).abs() <= 1e-12 * mse.max(1.0));
}

#[test]
fn pipeline_emits_stable_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["pipeline"])
        .arg(config("fourdg_default.toml"))
        .args(["--rows", "600", "--snr", "inf,75,40", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("fourdg_default_pipeline.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "snr_db,train_mae,train_mse,train_rmse,validation_mae,validation_mse,validation_rmse,test_mae,test_mse,test_rmse,epochs_run,status"
    );
    // One row per SNR level, nine metric cells each.
    for expected in ["inf,", "75,", "40,"] {
        let row = lines.next().unwrap();
        assert!(row.starts_with(expected), "{row}");
        assert_eq!(row.split(',').count(), 12);
        assert!(row.ends_with(",ok"));
    }
    assert!(lines.next().is_none());
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["simulate"])
        .arg(config("fourdg_default.toml"))
        .args(["--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("fourdg_default_trajectory.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("t,omega_1,v_1,p_1,q_1"));
    assert_eq!(csv.lines().count(), 10_002); // header + 10001 states
}
