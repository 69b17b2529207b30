use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn cdrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdrop"))
        .args(args)
        .env_remove("CDROP_OUTPUT_ROOT")
        .output()
        .expect("cdrop runs")
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, dropout: &str, drift_hidden: &str, output_dir: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "model": {{"d_x": 2, "d_z": 3, "n_classes": 2, "horizon": 1.0,
             "scheme": {{"method": "euler", "steps": 4}},
             "dropout": {dropout}, "drift_hidden": {drift_hidden}, "classifier_hidden": []}},
  "training": {{"epochs": 3, "batch_size": 8, "learning_rate": 0.01, "seed": 5}},
  "data": {{"source": "two_spirals", "n_per_class": 30, "noise_std": 0.1, "seed": 2}},
  "inference": {{"n_mc": 3, "seeds": [0, 1]}},
  "output_dir": "{output_dir}"
}}"#
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const CONTINUUM: &str = r#"{"kind": "continuum", "p": 0.3, "m": 10.0}"#;

#[test]
fn solve_lambdas_exact_and_approx() {
    let out = cdrop(&["solve-lambdas", "--p", "0.5", "--m", "50", "--T", "10"]);
    assert_eq!(code(&out), 0);
    let v = json_stdout(&out);
    assert_eq!(v["method"], "exact");
    assert!(v["m_residual"].as_f64().unwrap().abs() < 1e-9);
    assert_eq!(v["approx"]["lambda1"].as_f64().unwrap(), 10.0);
    let l1 = v["lambda1"].as_f64().unwrap();
    assert!((l1 - v["lambda2"].as_f64().unwrap()).abs() < 1e-9 && l1 > 10.0 && l1 < 10.2);

    let out = cdrop(&["solve-lambdas", "--approx", "--p", "0.2", "--m", "10", "--horizon", "1"]);
    assert_eq!(code(&out), 0);
    let v = json_stdout(&out);
    assert_eq!(v["lambda1"].as_f64().unwrap(), 12.5);
    assert_eq!(v["lambda2"].as_f64().unwrap(), 50.0);
}

#[test]
fn bad_flags_exit_2_and_unsolvable_exits_3() {
    assert_eq!(code(&cdrop(&["solve-lambdas", "--p", "1.5", "--m", "10", "--T", "1"])), 2);
    assert_eq!(code(&cdrop(&["solve-lambdas", "--p", "0.5", "--m", "10"])), 2);
    assert_eq!(code(&cdrop(&["no-such-command"])), 2);
    let out = cdrop(&["solve-lambdas", "--p", "0.99999", "--m", "1e6", "--T", "1e-9"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_renewal_gates() {
    let out = cdrop(&["verify-renewal", "--samples", "20000", "--seed", "3"]);
    assert_eq!(code(&out), 0);
    let v = json_stdout(&out);
    assert_eq!(v["availability"]["pass"], true);
    assert_eq!(v["renewals"]["pass"], true);

    let out = cdrop(&["verify-renewal", "--samples", "500"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("underpowered"));
}

#[test]
fn gen_data_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/blobs.csv");
    let out = cdrop(&[
        "gen-data",
        "--generator",
        "gaussian_blobs",
        "--out",
        path.to_str().unwrap(),
        "--n-per-class",
        "7",
        "--k",
        "3",
        "--d-x",
        "4",
    ]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().rsplit(',').next(), Some("label"));
    assert_eq!(lines.count(), 21);
}

#[test]
fn train_evaluate_calibrate_sweep_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.json", CONTINUUM, "[8]", out_dir.to_str().unwrap());
    let cfg = cfg.to_str().unwrap();

    let out = cdrop(&["train", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = json_stdout(&out);
    assert_eq!(metrics["epochs_run"], 3);
    assert!(metrics["provenance"]["lambda1"].as_f64().unwrap() > 0.0);
    for f in ["checkpoint.txt", "checkpoint.bin", "history.csv", "metrics.json"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let history = fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("# config_hash="));
    assert!(history.contains("epoch,train_loss,val_loss,val_acc,wall_ms"));

    let out = cdrop(&["evaluate", "--config", cfg]);
    assert_eq!(code(&out), 0);
    let acc = json_stdout(&out)["test"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let out = cdrop(&["calibrate", "--config", cfg]);
    assert_eq!(code(&out), 0);
    let v = json_stdout(&out);
    assert_eq!(v["bins"].as_array().unwrap().len(), 10);
    assert!(out_dir.join("reliability.csv").exists());

    let out = cdrop(&["mc-sweep", "--config", cfg]);
    assert_eq!(code(&out), 0);
    let sweep = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 6);

    let explicit = out_dir.join("checkpoint.txt");
    let out = cdrop(&["evaluate", "--config", cfg, "--checkpoint", explicit.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(json_stdout(&out)["test"]["accuracy"].as_f64().unwrap(), acc);
}

#[test]
fn replay_writes_identical_history() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.json", CONTINUUM, "[8]", out_dir.to_str().unwrap());
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&cdrop(&["train", "--config", cfg])), 0);
    let first = fs::read(out_dir.join("history.csv")).unwrap();
    let first_ckpt = fs::read(out_dir.join("checkpoint.bin")).unwrap();
    assert_eq!(code(&cdrop(&["train", "--config", cfg])), 0);
    assert_eq!(first, fs::read(out_dir.join("history.csv")).unwrap());
    assert_eq!(first_ckpt, fs::read(out_dir.join("checkpoint.bin")).unwrap());
}

#[test]
fn checkpoint_from_other_architecture_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let a = write_config(dir.path(), "a.json", r#"{"kind": "none"}"#, "[8]", out_dir.to_str().unwrap());
    assert_eq!(code(&cdrop(&["train", "--config", a.to_str().unwrap()])), 0);
    let b = write_config(dir.path(), "b.json", r#"{"kind": "none"}"#, "[9]", out_dir.to_str().unwrap());
    let out = cdrop(&["evaluate", "--config", b.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONTINUUM, "[8]", "out");
    let text = fs::read_to_string(&cfg).unwrap().replacen("\"epochs\"", "\"epoch_count\": 1, \"epochs\"", 1);
    fs::write(&cfg, text).unwrap();
    assert_eq!(code(&cdrop(&["train", "--config", cfg.to_str().unwrap()])), 2);
    let missing = dir.path().join("absent.json");
    assert_eq!(code(&cdrop(&["train", "--config", missing.to_str().unwrap()])), 2);
    let none = write_config(dir.path(), "n.json", r#"{"kind": "none"}"#, "[8]", "out");
    assert_eq!(code(&cdrop(&["mc-sweep", "--config", none.to_str().unwrap()])), 2);
}

#[test]
fn output_root_relocates_relative_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let cfg = write_config(dir.path(), "c.json", r#"{"kind": "none"}"#, "[8]", "rel/run");
    let out = Command::new(env!("CARGO_BIN_EXE_cdrop"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("CDROP_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("rel/run/history.csv").exists());
}

#[test]
fn compare_tabulates_three_modes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.json", CONTINUUM, "[8]", out_dir.to_str().unwrap());
    let out = cdrop(&["compare", "--config", cfg.to_str().unwrap(), "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(out_dir.join("compare/compare_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "mode,p,m,median_test_acc,median_gap,n_seeds");
    assert_eq!(rows.len(), 4);
    let runs = fs::read_to_string(out_dir.join("compare/compare_runs.csv")).unwrap();
    assert_eq!(runs.lines().filter(|l| !l.starts_with('#')).count(), 7);
}
