//! Report emission from a synthesized run directory: row counts, summary
//! fields, and byte-stable re-emission.

use std::collections::BTreeMap;

use papforge::analysis::{emit_report, FeatureRecord, FeatureVector};
use papforge::brkga::SolverConfig;
use papforge::coevolution::PapCheckpoint;

fn fake_run_dir(dir: &std::path::Path, rounds: usize, instances: usize) {
    for round in 1..=rounds {
        let members = vec![
            SolverConfig::new(10, 20, 5, 0.5, false).unwrap(),
            SolverConfig::new(12, 24, 6, 0.6, true).unwrap(),
        ];
        let per_instance: BTreeMap<String, f64> = (0..instances)
            .map(|i| {
                (
                    format!("inst-{i}"),
                    0.8 + 0.01 * (round * instances + i) as f64,
                )
            })
            .collect();
        let checkpoint = PapCheckpoint {
            round,
            members,
            objective: per_instance.values().sum(),
            psi_size: 6,
            subsets_visited: 15,
            per_instance,
        };
        let round_dir = dir.join(format!("round_{round}"));
        std::fs::create_dir_all(&round_dir).unwrap();
        std::fs::write(
            round_dir.join("pap.json"),
            serde_json::to_string_pretty(&checkpoint).unwrap(),
        )
        .unwrap();
    }
}

#[test]
fn report_rows_cover_every_round_and_instance() {
    let run = tempfile::tempdir().unwrap();
    fake_run_dir(run.path(), 3, 4);
    let out = tempfile::tempdir().unwrap();
    emit_report(run.path(), out.path()).unwrap();

    let qualities = std::fs::read_to_string(out.path().join("instance_quality.csv")).unwrap();
    assert_eq!(qualities.lines().count(), 1 + 3 * 4);
    let objectives = std::fs::read_to_string(out.path().join("round_objectives.csv")).unwrap();
    assert_eq!(objectives.lines().count(), 1 + 3);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["rounds"].as_array().unwrap().len(), 3);
    assert_eq!(summary["instances_seen"], 4);
    assert_eq!(summary["has_feature_coords"], false);
}

#[test]
fn re_emission_is_byte_identical_and_picks_up_features() {
    let run = tempfile::tempdir().unwrap();
    fake_run_dir(run.path(), 2, 2);
    let records = vec![FeatureRecord {
        instance_id: "inst-0".into(),
        group: "train".into(),
        vector: FeatureVector {
            values: vec![0.25; 32],
        },
        coords: Some([1.5, -0.75]),
    }];
    std::fs::write(
        run.path().join("features.json"),
        serde_json::to_string_pretty(&records).unwrap(),
    )
    .unwrap();

    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    emit_report(run.path(), out_a.path()).unwrap();
    emit_report(run.path(), out_b.path()).unwrap();
    for name in [
        "instance_quality.csv",
        "round_objectives.csv",
        "feature_coords.csv",
        "summary.json",
    ] {
        let a = std::fs::read(out_a.path().join(name)).unwrap();
        let b = std::fs::read(out_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} not byte-stable");
        assert!(!a.is_empty());
    }
    let coords = std::fs::read_to_string(out_a.path().join("feature_coords.csv")).unwrap();
    assert!(coords.contains("inst-0,train,1.5,-0.75"));
}

#[test]
fn missing_round_checkpoints_error() {
    let run = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert!(emit_report(run.path(), out.path()).is_err());
}
