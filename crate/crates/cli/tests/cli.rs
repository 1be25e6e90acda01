use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scl_core::report;
use scl_core::selection::read_plan;
use scl_core::snapshot::read_series;
use scl_core::toy::read_dataset;

fn scl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = scl(args);
    assert!(out.status.success(), "scl {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero_and_lists_exit_codes() {
    let out = scl(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Exit codes"));
    for cmd in ["gen-data", "train-ref", "analyze", "build-batches", "train-scl", "report", "pipeline"] {
        assert!(text.contains(cmd), "help is missing {cmd}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(scl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(scl(&["gen-data"]).status.code(), Some(1));
    assert_eq!(scl(&["analyze", "--snapshots", "x", "--mode", "median", "--out", "y"]).status.code(), Some(1));
    assert_eq!(scl(&["gen-data", "--groups", "3:x", "--out", "y"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_one_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = scl(&["analyze", "--snapshots", p(&dir.path().join("absent")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("analyze") && err.contains("manifest.json"), "{err}");
}

#[test]
fn malformed_delta_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let delta = dir.path().join("delta.mat");
    fs::write(&delta, "0 1 0.0 0.5\n1 1 0.2\n").unwrap();
    let out = scl(&["build-batches", "--delta", p(&delta), "--out", p(&dir.path().join("plan.jsonl"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn single_checkpoint_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let (data, reference) = (dir.path().join("data"), dir.path().join("ref"));
    ok(&["gen-data", "--n", "8", "--out", p(&data)]);
    ok(&["train-ref", "--data", p(&data), "--epochs", "0", "--out", p(&reference)]);
    let out = scl(&["analyze", "--snapshots", p(&reference), "--out", p(&dir.path().join("a"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--n", "16", "--out", p(&data)]);
    let out = scl(&["train-ref", "--data", p(&data), "--lr", "1e200", "--epochs", "5", "--out", p(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn pipeline_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = scl(&["pipeline", "--n", "12", "--epochs", "0", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: analyze"));
}

#[test]
fn stages_chain_by_hand() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    ok(&["gen-data", "--n", "20", "--groups", "2:4,1:12", "--seed", "4", "--out", p(&d("data"))]);
    assert_eq!(read_dataset(&d("data")).unwrap().same_group_pairs().len(), 8);

    ok(&["train-ref", "--data", p(&d("data")), "--epochs", "6", "--interval", "2", "--mode", "cls", "--out", p(&d("ref"))]);
    assert_eq!(read_series(&d("ref")).unwrap().checkpoints(), vec![0, 2, 4, 6]);

    ok(&["analyze", "--snapshots", p(&d("ref")), "--stride", "4", "--out", p(&d("an"))]);
    let summary = report::read_summary(&d("an").join("analysis.json")).unwrap();
    assert_eq!(summary.checkpoints, vec![0, 4, 6]);
    assert_eq!(summary.aggregation.map(|a| a.as_str()), Some("cls"));

    ok(&[
        "build-batches", "--delta", p(&d("an").join("delta.mat")), "--schedule", "easy", "--epochs", "3", "--batch-size",
        "4", "--exclude-duplicate-texts", "--data", p(&d("data")), "--out", p(&d("plan.jsonl")),
    ]);
    let plans = read_plan(&d("plan.jsonl")).unwrap();
    let groups = read_dataset(&d("data")).unwrap().groups;
    for plan in &plans {
        plan.check_partition(20).unwrap();
        for batch in &plan.batches {
            for (x, &a) in batch.ids.iter().enumerate() {
                assert!(batch.ids[x + 1..].iter().all(|&b| groups[a] != groups[b]));
            }
        }
    }

    ok(&["train-scl", "--data", p(&d("data")), "--plan", p(&d("plan.jsonl")), "--init-from", p(&d("ref")), "--out", p(&d("scl"))]);
    assert_eq!(read_series(&d("scl")).unwrap().checkpoints(), vec![0, 3]);

    ok(&[
        "report", "--analysis", p(&d("an")), "--schedule", "sqrt", "--epochs", "3", "--loss", p(&d("ref").join("loss.csv")),
        "--out", p(&d("rep")),
    ]);
    for file in ["report.csv", "trajectories.svg", "schedule.svg", "loss.svg"] {
        assert!(d("rep").join(file).is_file(), "{file} missing");
    }
    assert_eq!(
        fs::read(d("rep").join("report.csv")).unwrap(),
        fs::read(d("an").join("report.csv")).unwrap()
    );
}

#[test]
fn analyze_accepts_precomputed_similarities() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("sims");
    fs::create_dir_all(root.join("ckpt_0")).unwrap();
    fs::create_dir_all(root.join("ckpt_2")).unwrap();
    fs::write(
        root.join("manifest.json"),
        r#"{"n": 2, "dim": 2, "checkpoints": [0, 2], "aggregation": null, "kind": "similarity"}"#,
    )
    .unwrap();
    fs::write(root.join("ckpt_0/sim.mat"), "0 1 0.9 0.1\n1 1 0.5 0.8\n").unwrap();
    fs::write(root.join("ckpt_2/sim.mat"), "0 1 0.9 0.7\n1 1 0.1 0.8\n").unwrap();
    ok(&["analyze", "--snapshots", p(&root), "--out", p(&dir.path().join("an"))]);
    let fits = report::read_fits(&dir.path().join("an/fits.csv")).unwrap();
    let labels: Vec<&str> = fits.iter().map(|f| f.label.as_str()).collect();
    assert_eq!(labels, ["LH", "HL"]);
}
