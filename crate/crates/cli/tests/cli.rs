//! Binary-level tests: exit codes, manifest validation, overwrite guard,
//! and a toy end-to-end pipeline through run, report and evaluate.

use std::path::Path;
use std::process::Command;

fn papforge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_papforge"))
}

fn write_toy_manifest(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("manifest.json");
    std::fs::write(
        &path,
        r#"{
  "problem": {
    "class": "ccp",
    "train": { "count": 2, "dimensions": [8], "lambdas": [1e-4], "scenarios": 30 },
    "test": { "count": 3, "dimensions": [8], "lambdas": [0.0, 1e-2], "scenarios": 30 }
  },
  "run": {
    "portfolio_size": 2,
    "max_rounds": 1,
    "mining_iterations": 2,
    "aac_max_trials": 3,
    "aac_restarts": 1,
    "mutation_max_iter": 1,
    "pgpe_directions": 2,
    "initial_configs": 4,
    "solver_budget": 100,
    "replications": 1,
    "nir_norm_samples": 1000,
    "real_norm_samples": 1000,
    "training_samples": 200,
    "max_epochs": 3,
    "patience": 2,
    "evaluate_repetitions": 2
  },
  "seed": 5
}"#,
    )
    .unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = papforge().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.to_lowercase().contains("usage"), "{stderr}");
}

#[test]
fn unknown_manifest_key_fails_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{ "frob": true }"#).unwrap();
    let out = papforge()
        .args(["dace-run", "--manifest"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("frob"), "{stderr}");
}

#[test]
fn toy_pipeline_runs_then_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_toy_manifest(dir.path());
    let run_dir = dir.path().join("run");

    let out = papforge()
        .args(["dace-run", "--workers", "2", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run_dir.join("round_1/pap.json").exists());
    assert!(run_dir.join("cache.json").exists());

    // A finished run refuses to be redone without --force.
    let again = papforge()
        .args(["dace-run", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert_eq!(again.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&again.stderr);
    assert!(stderr.contains("--force"), "{stderr}");

    // Report emission, twice, byte-identical.
    let report_dir = dir.path().join("report");
    for _ in 0..2 {
        let out = papforge()
            .arg("report")
            .arg("--run")
            .arg(&run_dir)
            .arg("--out")
            .arg(&report_dir)
            .arg("--force")
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let summary = std::fs::read_to_string(report_dir.join("summary.json")).unwrap();
    assert!(summary.contains("final_objective"));
    let quality_csv = std::fs::read_to_string(report_dir.join("instance_quality.csv")).unwrap();
    // Header plus rounds x instances rows: rounds 0 and 1, two instances.
    assert_eq!(quality_csv.lines().count(), 1 + 2 * 2);

    // Evaluate the manual baseline on the test set.
    let eval_dir = dir.path().join("eval");
    let out = papforge()
        .args(["evaluate", "--baseline", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("evaluation.json")).unwrap())
            .unwrap();
    assert_eq!(eval["rows"].as_array().unwrap().len(), 3);
    assert_eq!(eval["repetitions"], 2);
    assert!(eval["mean_quality"].as_f64().unwrap().is_finite());
}

#[test]
fn evaluate_requires_a_portfolio_source() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_toy_manifest(dir.path());
    let out = papforge()
        .args(["evaluate", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(dir.path().join("eval"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--pap"), "{stderr}");
}
