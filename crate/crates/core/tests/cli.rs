//! End-to-end runs of the `simo` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn simo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simo"))
        .args(args)
        .env("SIMO_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config(dir: &Path) -> Value {
    json!({
        "dataset": {"synthetic": {"num_classes": 4, "samples_per_class": 40, "feature_dim": 8, "seed": 3}},
        "train": {"batch_size": 16, "k": 8, "iterations": 20, "log_period": 5, "hidden": [16], "embed_dim": 4, "seed": 1},
        "diagnostics": {"report": {"pairwise_samples": 12, "semimetric_trials": 50}},
        "output_dir": dir.join("run"),
    })
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_metrics_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config(dir.path()));
    let out = simo(&["train", "--config", s(&config)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    assert!(run.join("checkpoint.bin").is_file());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "iteration,l_similar,l_mean_dissimilar,l_dissimilar,total");
    assert_eq!(lines.len() - 1, 20 / 5);
    let resolved: Value = serde_json::from_str(&fs::read_to_string(run.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["simo"]["epsilon"], json!(1e-6));
    assert_eq!(resolved["train"]["simo"]["olean"], json!(0.1));
    assert_eq!(resolved["train"]["learning_rate"], json!(1e-3));
    assert_eq!(resolved["train"]["optimizer"], json!("adam"));
}

#[test]
fn resolved_config_alone_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config(dir.path()));
    assert_eq!(code(&simo(&["train", "--config", s(&config)])), 0);
    let run = dir.path().join("run");
    let again = dir.path().join("again");
    let resolved = run.join("resolved-config.json");
    let before = fs::read(&resolved).unwrap();
    assert_eq!(code(&simo(&["train", "--config", s(&resolved), "--out", s(&again)])), 0);
    assert_eq!(fs::read(&resolved).unwrap(), before, "config input must not change");
    for file in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(run.join(file)).unwrap(), fs::read(again.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config(dir.path()));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&simo(&["train", "--config", s(&config), "--out", s(&a)])), 0);
    assert_eq!(code(&simo(&["train", "--config", s(&config), "--out", s(&b), "--seed", "99"])), 0);
    assert_ne!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    let resolved: Value = serde_json::from_str(&fs::read_to_string(b.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["seed"], json!(99));
}

#[test]
fn indivisible_batch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = small_config(dir.path());
    value["train"]["batch_size"] = json!(17);
    let config = write_config(dir.path(), "c.json", &value);
    let out = simo(&["train", "--config", s(&config)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_key_and_bad_json_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = small_config(dir.path());
    value["train"]["learning_rte"] = json!(0.1);
    let config = write_config(dir.path(), "c.json", &value);
    let out = simo(&["train", "--config", s(&config)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rte"));

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{").unwrap();
    assert_eq!(code(&simo(&["train", "--config", s(&broken)])), 1);
}

#[test]
fn undersized_class_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = small_config(dir.path());
    value["dataset"]["synthetic"]["samples_per_class"] = json!(6);
    let config = write_config(dir.path(), "c.json", &value);
    let out = simo(&["train", "--config", s(&config)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("class"));
}

#[test]
fn probe_reports_accuracies_and_leaves_checkpoint_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config(dir.path()));
    assert_eq!(code(&simo(&["train", "--config", s(&config)])), 0);
    let checkpoint = dir.path().join("run/checkpoint.bin");
    let before = fs::read(&checkpoint).unwrap();
    let out = simo(&["probe", "--checkpoint", s(&checkpoint), "--config", s(&config)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["train_accuracy", "test_accuracy"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(fs::read(&checkpoint).unwrap(), before);
}

#[test]
fn probe_checkpoint_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config(dir.path()));
    let missing = dir.path().join("missing.bin");
    assert_eq!(code(&simo(&["probe", "--checkpoint", s(&missing), "--config", s(&config)])), 2);

    assert_eq!(code(&simo(&["train", "--config", s(&config)])), 0);
    let mut other = small_config(dir.path());
    other["dataset"]["synthetic"]["feature_dim"] = json!(5);
    let other = write_config(dir.path(), "other.json", &other);
    let checkpoint = dir.path().join("run/checkpoint.bin");
    let out = simo(&["probe", "--checkpoint", s(&checkpoint), "--config", s(&other)]);
    assert_eq!(code(&out), 2);

    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&simo(&["probe", "--checkpoint", s(&garbage), "--config", s(&config)])), 2);
}

#[test]
fn verify_defaults_pass_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&simo(&["verify", "--out", s(&a)])), 0);
    assert_eq!(code(&simo(&["verify", "--out", s(&b)])), 0);
    let text = fs::read(a.join("verify.json")).unwrap();
    assert_eq!(text, fs::read(b.join("verify.json")).unwrap());
    let report: Value = serde_json::from_slice(&text).unwrap();
    assert!(!report["semimetric"]["triangle_violations"].as_array().unwrap().is_empty());
    assert_eq!(report["semimetric"]["witness_violated"], json!(true));
}

#[test]
fn verify_at_unit_epsilon_still_finds_the_witness() {
    let out = simo(&["verify", "--epsilon", "1", "--trials", "200"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let witness = report["semimetric"]["triangle_violations"]
        .as_array()
        .unwrap()
        .iter()
        .find(|v| v["trial"].is_null())
        .expect("witness reported");
    // d'((1,0),(0,1)) = 2 against 1/2 + 1/2 on the two legs through (1,1)
    assert_eq!(witness["lhs"], json!(2.0));
    assert_eq!(witness["rhs"], json!(1.0));
}

#[test]
fn verify_rejects_bad_epsilon() {
    assert_eq!(code(&simo(&["verify", "--epsilon", "0"])), 1);
    assert_eq!(code(&simo(&["verify", "--epsilon", "-1"])), 1);
}

#[test]
fn diagnose_writes_report_matrices_and_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config(dir.path()));
    assert_eq!(code(&simo(&["train", "--config", s(&config)])), 0);
    let checkpoint = dir.path().join("run/checkpoint.bin");
    let out_dir = dir.path().join("diag");
    let out = simo(&["diagnose", "--checkpoint", s(&checkpoint), "--config", s(&config), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("diagnostics.json")).unwrap()).unwrap();
    let raw = report["class_mean_matrix"]["raw"].as_array().unwrap();
    assert_eq!(raw.len(), 4);
    for (i, row) in raw.iter().enumerate() {
        assert_eq!(row.as_array().unwrap().len(), 4);
        assert_eq!(row[i], json!(0.0));
    }
    let rank = report["effective_rank"].as_f64().unwrap();
    assert!((1.0..=4.0).contains(&rank));
    assert_eq!(fs::read_to_string(out_dir.join("class_mean_matrix.csv")).unwrap().lines().count(), 4);
    let embeddings = fs::read_to_string(out_dir.join("embeddings.csv")).unwrap();
    assert_eq!(embeddings.lines().next().unwrap(), "label,e0,e1,e2,e3");
    assert_eq!(embeddings.lines().count(), 1 + 160);
}

#[test]
fn diagnose_empty_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config(dir.path()));
    assert_eq!(code(&simo(&["train", "--config", s(&config)])), 0);
    let mut empty = small_config(dir.path());
    empty["dataset"]["synthetic"]["samples_per_class"] = json!(0);
    let empty = write_config(dir.path(), "empty.json", &empty);
    let checkpoint = dir.path().join("run/checkpoint.bin");
    assert_eq!(code(&simo(&["diagnose", "--checkpoint", s(&checkpoint), "--config", s(&empty)])), 2);
}

#[test]
fn gen_data_round_trips_through_record_source() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &small_config(dir.path()));
    let records = dir.path().join("data.bin");
    assert_eq!(code(&simo(&["gen-data", "--config", s(&config), "--out", s(&records)])), 0);
    assert_eq!(fs::metadata(&records).unwrap().len(), 160 * 9);

    let mut value = small_config(dir.path());
    value["dataset"] = json!({"records": {"path": records, "feature_dim": 8, "num_classes": 4}});
    let from_records = write_config(dir.path(), "records.json", &value);
    assert_eq!(code(&simo(&["train", "--config", s(&from_records)])), 0);

    let truncated = dir.path().join("short.bin");
    fs::write(&truncated, &fs::read(&records).unwrap()[..100]).unwrap();
    value["dataset"]["records"]["path"] = json!(truncated);
    let bad = write_config(dir.path(), "bad.json", &value);
    let out = simo(&["train", "--config", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
}
