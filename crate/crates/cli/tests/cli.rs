//! End-to-end checks of the `concat-lab` binary on short runs.

use std::path::Path;
use std::process::{Command, Output};

const SHORT: [&str; 8] = [
    "--set",
    "stages.stage1_epochs=2",
    "--set",
    "stages.stage2_epochs=2",
    "--set",
    "stages.stage3_epochs=1",
    "--set",
    "dataset.n_train=40",
];

fn lab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concat-lab"))
        .arg("--out")
        .arg(out)
        .args(["--seed", "5"])
        .args(SHORT)
        .args(["--set", "dataset.n_test=20"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_twice_gives_identical_metrics_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_ok(&lab(&a, &["pipeline"]));
    assert_ok(&lab(&b, &["pipeline"]));
    let ma = std::fs::read(a.join("metrics.json")).unwrap();
    let mb = std::fs::read(b.join("metrics.json")).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, mb);
    for f in ["config.json", "stage1.json", "stage1.bin", "stage2.json", "stage3.bin", "summary.csv"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
}

#[test]
fn later_stage_without_earlier_one_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["stage2"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage 1"), "{err}");
    assert_ok(&lab(dir.path(), &["stage1"]));
    let o = lab(dir.path(), &["stage3"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage 2"));
}

#[test]
fn ablate_query_contrast_changes_only_lambda_r() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&lab(dir.path(), &["ablate", "qc=off"]));
    let mut full = json(&dir.path().join("ablate/full/config.json"));
    let off = json(&dir.path().join("ablate/qc_off/config.json"));
    assert_eq!(off["losses"]["lambda_r"], 0.0);
    full["losses"]["lambda_r"] = 0.0.into();
    assert_eq!(full, off);
    let table = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn unknown_ablation_switch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["ablate", "nope=on"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope=on"));
}

#[test]
fn inductive_pipeline_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&lab(dir.path(), &["pipeline", "--mode", "inductive"]));
    assert!(!dir.path().join("stage2.json").exists());
    let m = json(&dir.path().join("metrics.json"));
    for k in ["sPQ", "uPQ", "hPQ", "sIoU", "uIoU", "hIoU"] {
        assert!(m[k].is_f64(), "{k}");
    }
    let o = lab(dir.path(), &["eval"]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("uPQ"));
    assert_eq!(json(&dir.path().join("metrics.json")), m);
}

#[test]
fn export_embeddings_writes_labelled_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&lab(dir.path(), &["pipeline"]));
    let o = lab(dir.path(), &["export-embeddings", "--per-category", "3"]);
    assert_ok(&o);
    let path = String::from_utf8_lossy(&o.stdout).trim().trim_start_matches("wrote ").to_string();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.lines().count() > 1);
}
