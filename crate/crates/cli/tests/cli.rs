//! End-to-end tests of the binary: subcommand behaviour, output files,
//! and the documented exit codes (0 success, 1 usage, 2 numerical).

use std::path::Path;
use std::process::{Command, Output};

use edmd_mpc::edmd::EdmdModel;

const BIN: &str = env!("CARGO_BIN_EXE_edmd-mpc");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn write_scenario(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.display().to_string()
}

/// Short scenario to keep debug-mode runs quick.
const SHORT: &str = r#"{
    "total_days": 7.0,
    "mpc": {"horizon_days": 3.5, "n_init_snapshots": 60}
}"#;

#[test]
fn version_and_help_exit_zero() {
    let out = run(&["--version"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("edmd-mpc"), "version line: {text}");

    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["simulate", "fit", "mpc", "compare"] {
        assert!(text.contains(sub), "help must list `{sub}`");
    }
}

#[test]
fn usage_errors_exit_one() {
    // unknown subcommand
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    // missing required arguments
    assert_eq!(run(&["mpc"]).status.code(), Some(1));
    // nonexistent scenario file
    let out = run(&[
        "simulate",
        "--scenario",
        "/definitely/not/here.json",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(out.status.code(), Some(1));
    // fit rejects the nonlinear mode
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", SHORT);
    let out = run(&[
        "fit",
        "--scenario",
        &scenario,
        "--mode",
        "nonlinear",
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    // misspelled scenario keys are configuration errors, not crashes
    let bad = write_scenario(dir.path(), "bad.json", r#"{"total_dayz": 7.0}"#);
    let out = run(&[
        "simulate",
        "--scenario",
        &bad,
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("total_dayz"), "stderr: {err}");
}

#[test]
fn numerical_failures_exit_two() {
    // a zero baseline stimulus gives an identically zero steady state,
    // which the lifting rejects as degenerate
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", r#"{"plant": {"e_base": 0.0}}"#);
    let out = run(&[
        "fit",
        "--scenario",
        &scenario,
        "--mode",
        "edmd-c",
        "--out",
        dir.path().join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("degenerate"), "stderr: {err}");
}

#[test]
fn simulate_writes_the_documented_csv() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", r#"{"fixed_dose": 0.02}"#);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "simulate",
        "--scenario",
        &scenario,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("simulate.csv")).unwrap();
    assert!(text.starts_with(
        "step,t_days,dose_applied,hemoglobin,surrogate_error,update_fired,solve_wall_seconds"
    ));
    // 21 default days at half-day steps: initial row + 42 steps
    assert_eq!(text.lines().count(), 44);
}

#[test]
fn fit_writes_a_loadable_model_and_prints_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", SHORT);
    let model_path = dir.path().join("model.json");
    let out = run(&[
        "fit",
        "--scenario",
        &scenario,
        "--mode",
        "edmd-c",
        "--out",
        model_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("residuals"), "stdout: {text}");
    assert!(text.contains("dynamics"), "stdout: {text}");

    let model = EdmdModel::from_json(&std::fs::read_to_string(&model_path).unwrap()).unwrap();
    assert_eq!(model.lifted_dim(), 33, "16 modes, depth 2, plus output");
    assert!(model.residual_dynamics.is_finite());
}

#[test]
fn mpc_and_compare_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", SHORT);
    let dir_ed = dir.path().join("ed");
    let dir_nl = dir.path().join("nl");
    for (mode, out_dir) in [("edmd-c", &dir_ed), ("nonlinear", &dir_nl)] {
        let out = run(&[
            "mpc",
            "--scenario",
            &scenario,
            "--mode",
            mode,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{mode}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(out_dir.join("trace.csv").exists());
        assert!(out_dir.join("trace.json").exists());
    }

    let report_path = dir.path().join("report.json");
    let out = run(&[
        "compare",
        "--a",
        dir_ed.join("trace.json").to_str().unwrap(),
        "--b",
        dir_nl.join("trace.json").to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["rel_error"].as_f64().unwrap().is_finite());
    assert!(report["speed_up"].as_f64().unwrap() > 0.0);
    assert_eq!(
        report["error_series"].as_array().unwrap().len(),
        15,
        "7 days at half-day steps plus the initial point"
    );

    // comparing traces on different grids is a usage error
    let dir_long = dir.path().join("long");
    let scenario_21 = write_scenario(dir.path(), "s21.json", "{}");
    let out = run(&[
        "mpc",
        "--scenario",
        &scenario_21,
        "--mode",
        "nonlinear",
        "--out",
        dir_long.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = run(&[
        "compare",
        "--a",
        dir_ed.join("trace.json").to_str().unwrap(),
        "--b",
        dir_long.join("trace.json").to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_flag_overrides_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "s.json", SHORT);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (seed, out_dir) in [("7", &out_a), ("7", &out_b)] {
        let out = run(&[
            "mpc",
            "--scenario",
            &scenario,
            "--mode",
            "edmd-c",
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    // same seed, same trace: the exported doses and outputs agree exactly
    let doc_a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("trace.json")).unwrap()).unwrap();
    let doc_b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_b.join("trace.json")).unwrap()).unwrap();
    assert_eq!(doc_a["rows"].as_array().unwrap().len(), 15);
    for (ra, rb) in doc_a["rows"]
        .as_array()
        .unwrap()
        .iter()
        .zip(doc_b["rows"].as_array().unwrap())
    {
        assert_eq!(ra["dose_applied"], rb["dose_applied"]);
        assert_eq!(ra["hemoglobin"], rb["hemoglobin"]);
    }
    // the echoed config records the overridden seed
    assert_eq!(doc_a["config"]["scenario"]["seed"], 7);
}
