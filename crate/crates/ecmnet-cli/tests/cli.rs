//! End-to-end tests of the command-line surface: exit codes, artifacts,
//! and the documented failure modes.

use std::path::Path;
use std::process::Command;

fn ecmnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecmnet"))
}

fn stdout_of(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr_of(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn selfcheck_green_path_exits_zero() {
    let out = ecmnet()
        .args(["selfcheck", "--grad-directions", "2"])
        .output()
        .unwrap();
    let text = stdout_of(&out);
    assert!(
        out.status.code() == Some(0),
        "exit {:?}\n{text}\n{}",
        out.status.code(),
        stderr_of(&out)
    );
    for suite in [
        "cross_scan",
        "selective_scan",
        "channel_shuffle",
        "metrics",
        "block_oracles",
        "gradients",
    ] {
        assert!(text.contains(suite), "missing suite {suite} in output");
    }
    assert!(text.contains("[PASS]"));
}

#[test]
fn corrupted_scan_hook_exits_one_and_names_the_suite() {
    let out = ecmnet()
        .args(["selfcheck", "--grad-directions", "0"])
        .env("ECMNET_SELFCHECK_CORRUPT", "cross_scan")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stdout_of(&out));
    let all = format!("{}{}", stdout_of(&out), stderr_of(&out));
    assert!(all.contains("cross_scan"), "{all}");
}

#[test]
fn analyze_reports_budget_and_orders_variants() {
    let parse_params = |text: &str| -> u64 {
        text.lines()
            .find(|l| l.starts_with("total parameters:"))
            .and_then(|l| l.split_whitespace().nth(2))
            .and_then(|v| v.parse().ok())
            .expect("parameter line")
    };
    let run = |variant: &str| {
        let out = ecmnet()
            .args(["analyze", "--variant", variant, "--input", "64x64"])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        parse_params(&stdout_of(&out))
    };
    let baseline = run("Baseline");
    let c3 = run("C3");
    assert!(baseline < c3, "Baseline {baseline} must stay below C3 {c3}");
}

#[test]
fn analyze_malformed_size_is_usage_error() {
    let out = ecmnet()
        .args(["analyze", "--variant", "C3", "--input", "1024x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("WIDTHxHEIGHT"));
}

#[test]
fn analyze_writes_budget_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("budget");
    let out = ecmnet()
        .args([
            "analyze",
            "--variant",
            "B1",
            "--input",
            "64x64",
            "--latency-trials",
            "3",
            "--out",
        ])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(out_dir.join("budget.json").is_file());
    assert!(out_dir.join("config.resolved.toml").is_file());
    assert!(out_dir.join("manifest.json").is_file());
    let budget: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("budget.json")).unwrap())
            .unwrap();
    assert!(budget["latency"]["hardware"].is_string());
    assert_eq!(budget["latency"]["trials_ms"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_missing_checkpoint_exits_two_naming_the_path() {
    let out = ecmnet()
        .args([
            "eval",
            "--checkpoint",
            "/nonexistent/path/model.ckpt",
            "--dataset",
            "synthetic",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("/nonexistent/path/model.ckpt"));
}

fn train_tiny(out_dir: &Path, iters: usize) -> std::process::Output {
    let overrides = [
        "model.stage_channels=[8,16,32]".to_string(),
        "model.blocks_per_stage=[1,1,1]".to_string(),
        "model.dilation_schedule=[[1],[1],[1]]".to_string(),
        "model.decoder_blocks=[1,1,1]".to_string(),
        "model.ffm_dim=16".to_string(),
        "model.ffm_state_dim=4".to_string(),
        format!("train.max_iters={iters}"),
        "train.batch_size=2".to_string(),
        "train.eval_every=0".to_string(),
        "data.size=[32,32]".to_string(),
        "model.input_size=[32,32]".to_string(),
    ];
    let mut cmd = ecmnet();
    cmd.arg("train");
    for ov in &overrides {
        cmd.args(["--set", ov]);
    }
    cmd.arg("--out").arg(out_dir).output().unwrap()
}

#[test]
fn train_then_eval_round_trip_with_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = train_tiny(&run_dir, 2);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(run_dir.join("history.jsonl").is_file());
    assert!(run_dir.join("last.ckpt").is_file());
    assert!(run_dir.join("config.resolved.toml").is_file());
    assert!(run_dir.join("manifest.json").is_file());

    // history is line-delimited JSON
    let history = std::fs::read_to_string(run_dir.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for line in history.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].is_number());
    }

    // evaluating a nearly-untrained model on 3 synthetic classes stays well
    // below 0.5 mean IoU
    let eval_dir = dir.path().join("eval");
    let out = ecmnet()
        .args([
            "eval",
            "--config",
        ])
        .arg(run_dir.join("config.resolved.toml"))
        .args(["--checkpoint"])
        .arg(run_dir.join("last.ckpt"))
        .args(["--dataset", "synthetic", "--samples", "4", "--out"])
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap())
            .unwrap();
    let miou = report["mean_iou"].as_f64().unwrap();
    assert!(miou < 0.5, "untrained model scored {miou}");

    // oracle predictor: ground truth against itself scores exactly 1.0
    let oracle_dir = dir.path().join("oracle");
    let out = ecmnet()
        .args(["eval", "--config"])
        .arg(run_dir.join("config.resolved.toml"))
        .args(["--checkpoint"])
        .arg(run_dir.join("last.ckpt"))
        .args(["--dataset", "synthetic", "--samples", "4", "--oracle", "--out"])
        .arg(&oracle_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(oracle_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["mean_iou"].as_f64().unwrap(), 1.0);
}

#[test]
fn eval_checkpoint_config_mismatch_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = train_tiny(&run_dir, 1);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    // evaluating under the default (different) model config must fail
    let out = ecmnet()
        .args(["eval", "--checkpoint"])
        .arg(run_dir.join("last.ckpt"))
        .args(["--dataset", "synthetic", "--samples", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("hash"));
}

#[test]
fn unknown_config_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecmnet()
        .args(["train", "--set", "train.not_a_key=5", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("invalid config"));
}

#[test]
fn synth_exports_images_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("synth");
    let out = ecmnet()
        .args(["synth", "--count", "2", "--size", "32", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(out_dir.join("sample0000.png").is_file());
    assert!(out_dir.join("sample0000_label.png").is_file());
    assert!(out_dir.join("sample0001.png").is_file());
    assert!(out_dir.join("manifest.json").is_file());
}
