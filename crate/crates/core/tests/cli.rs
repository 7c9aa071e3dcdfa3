//! End-to-end runs of the command-line binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_SPEC: &str = r#"{"n_train": 60, "n_test": 12, "timesteps": 32}"#;
const QUICK_TRAIN: &str = r#"{"epochs": 1, "lr": 0.001, "t_train": 32, "model": {"hidden": 16, "heads": 2, "scales": 2}}"#;

fn refdense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refdense"))
        .args(args)
        .env_remove("REFDENSE_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = refdense(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn small_data(root: &Path, name: &str, seed: &str) -> PathBuf {
    let spec = write(root, "spec.json", SMALL_SPEC);
    let out = root.join(name);
    ok(&[
        "gen-data",
        "--config",
        s(&spec),
        "--seed",
        seed,
        "--out",
        s(&out),
    ]);
    out
}

#[test]
fn gen_data_defaults_and_refuses_to_overwrite() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("data");
    ok(&["gen-data", "--out", s(&out)]);
    let manifest = json(&out.join("manifest.json"));
    let entries = manifest["sequences"].as_array().unwrap();
    assert_eq!(entries.len(), 250);
    assert!(out.join("run_manifest.json").exists());

    let again = refdense(&["gen-data", "--out", s(&out)]);
    assert_eq!(again.status.code(), Some(2));
    ok(&["gen-data", "--out", s(&out), "--force"]);
}

#[test]
fn same_seed_gives_identical_datasets() {
    let root = tempfile::tempdir().unwrap();
    let a = small_data(root.path(), "a", "7");
    let b = small_data(root.path(), "b", "7");
    let c = small_data(root.path(), "c", "8");
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    assert_ne!(ma, std::fs::read(c.join("manifest.json")).unwrap());
}

#[test]
fn oracle_scores_one_hundred() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "data", "1");
    let out = root.path().join("eval");
    ok(&[
        "eval",
        "--data",
        s(&data.join("manifest.json")),
        "--oracle",
        "--out",
        s(&out),
    ]);
    let table = std::fs::read_to_string(out.join("eval.txt")).unwrap();
    let row = table.lines().find(|l| l.starts_with("mAP ")).unwrap();
    assert!(row.ends_with("100.0"), "{table}");
    assert_eq!(json(&out.join("eval.json"))["map"].as_f64(), Some(1.0));
    assert!(out.join("per_class_ap.csv").exists());
}

#[test]
fn decompose_labels_writes_sub_label_records() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "data", "2");
    let out = root.path().join("sub.ndjson");
    ok(&[
        "decompose-labels",
        "--vocab",
        s(&data.join("vocabulary.json")),
        "--labels",
        s(&data.join("labels.ndjson")),
        "--out",
        s(&out),
    ]);
    let lines = std::fs::read_to_string(&out).unwrap();
    assert_eq!(lines.lines().count(), 72);
    assert!(root.path().join("sub.ndjson.run_manifest.json").exists());
}

#[test]
fn train_eval_report_pipeline_and_colv_flag() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path(), "data", "3");
    let manifest = data.join("manifest.json");
    let cfg = write(root.path(), "train.json", QUICK_TRAIN);

    let full = root.path().join("full");
    ok(&[
        "train",
        "--data",
        s(&manifest),
        "--config",
        s(&cfg),
        "--out",
        s(&full),
    ]);
    for f in [
        "steps.ndjson",
        "epochs.ndjson",
        "checkpoint.rfdc",
        "final.rfdc",
        "run_manifest.json",
    ] {
        assert!(full.join(f).exists(), "{f} missing");
    }
    let steps = std::fs::read_to_string(full.join("steps.ndjson")).unwrap();
    assert!(steps.lines().next().unwrap().contains("L_ent_colv"));

    let plain = root.path().join("plain");
    ok(&[
        "train",
        "--data",
        s(&manifest),
        "--config",
        s(&cfg),
        "--flags",
        "colv=off",
        "--out",
        s(&plain),
    ]);
    let steps = std::fs::read_to_string(plain.join("steps.ndjson")).unwrap();
    assert!(!steps.contains("colv"));
    assert!(steps.contains("L_ent_bce"));

    let eval = root.path().join("eval");
    ok(&[
        "eval",
        "--data",
        s(&manifest),
        "--checkpoint",
        s(&full.join("checkpoint.rfdc")),
        "--out",
        s(&eval),
    ]);
    let report = json(&eval.join("eval.json"));
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));

    let rendered = root.path().join("report");
    ok(&[
        "report",
        "--input",
        s(&eval.join("eval.json")),
        "--out",
        s(&rendered),
    ]);

    let run = json(&eval.join("run_manifest.json"));
    assert_eq!(run["command"], "eval");
    assert_eq!(run["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let root = tempfile::tempdir().unwrap();
    let unknown = write(root.path(), "bad.json", r#"{"not_a_field": 3}"#);
    let out = refdense(&[
        "gen-data",
        "--config",
        s(&unknown),
        "--out",
        s(&root.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let missing = refdense(&["eval", "--data", "/nonexistent/manifest.json", "--oracle"]);
    assert_eq!(missing.status.code(), Some(2));

    assert_eq!(refdense(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        refdense(&["train", "--data", "x", "--flags", "colv=maybe"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(refdense(&["--help"]).status.code(), Some(0));
}
