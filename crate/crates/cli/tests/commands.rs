use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use molkv_cli::ReportRecord;
use serde_json::{json, Value};

fn molkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molkv")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes a tiny manifest of `kind` whose paths all live in `dir`.
fn manifest(dir: &Path, kind: &str, steps: usize) -> PathBuf {
    let shipped = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("manifests/tiny-{kind}.json"));
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(shipped).unwrap()).unwrap();
    let corpus = dir.join("corpus.txt");
    if !corpus.exists() {
        std::fs::write(&corpus, molkv_core::train::synthetic_corpus(20_000, 4)).unwrap();
    }
    v["train"]["steps"] = steps.into();
    v["train"]["warmup_steps"] = 2.into();
    v["train"]["seq_length"] = 32.into();
    v["train"]["batch_size"] = 2.into();
    v["paths"] = json!({
        "corpus": corpus,
        "checkpoint": dir.join(format!("{kind}.ckpt")),
        "store": dir.join(format!("{kind}.mlkv")),
        "report": dir.join(format!("{kind}.jsonl")),
        "metrics": dir.join(format!("{kind}.log")),
    });
    v["decode"]["steps"] = 10.into();
    let path = dir.join(format!("{kind}.json"));
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn train_export_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "molkv", 4);
    let ms = m.to_str().unwrap();

    let o = molkv(&["train", "--manifest", ms]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("step=4 val_loss="));
    let log = std::fs::read_to_string(dir.path().join("molkv.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.starts_with("step=") && l.contains(" lr=") && l.contains(" grad_norm=")));

    let o = molkv(&["export", "--manifest", ms, "--dtype", "fp16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let store = std::fs::read(dir.path().join("molkv.mlkv")).unwrap();
    assert_eq!(&store[..4], b"MLKV");
    assert_eq!(store.len(), 64 + 2 * 256 * 2 * (32 + 8) * 2);

    let o = molkv(&["decode", "--manifest", ms]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("tokens decoded: 14 (4 prompt, 10 generated)"));
    let report = std::fs::read_to_string(dir.path().join("molkv.jsonl")).unwrap();
    let records: Vec<ReportRecord> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 14 * 2);
    for r in &records {
        assert_eq!(r.params_loaded, 2 * (32 + 8));
        assert_eq!(r.bytes_loaded, 2 * (32 + 8) * 2);
        assert_eq!(r.cache_len, r.token_index.min(16));
    }
    let first: Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["bytes_loaded", "cache_len", "layer", "macs", "params_loaded", "token_index"]);

    let again = molkv(&["decode", "--manifest", ms]);
    assert_eq!(stdout(&again), stdout(&o));
}

#[test]
fn same_manifest_and_seed_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "mole", 3);
    let ms = m.to_str().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    for out in [&a, &b] {
        let o = molkv(&["train", "--manifest", ms, "--seed", "9", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "gated-mole", 6);
    let ms = m.to_str().unwrap();
    let straight = dir.path().join("straight.ckpt");
    let split = dir.path().join("split.ckpt");
    assert!(molkv(&["train", "--manifest", ms, "--out", straight.to_str().unwrap()]).status.success());
    assert!(molkv(&["train", "--manifest", ms, "--until", "3", "--out", split.to_str().unwrap()]).status.success());
    let o = molkv(&["train", "--manifest", ms, "--resume", "--out", split.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&straight).unwrap(), std::fs::read(&split).unwrap());
}

#[test]
fn dense_decodes_without_store_and_cannot_export() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "dense", 2);
    let ms = m.to_str().unwrap();
    assert!(molkv(&["train", "--manifest", ms]).status.success());
    let o = molkv(&["decode", "--manifest", ms, "--steps", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(dir.path().join("dense.jsonl")).unwrap();
    assert!(report.lines().all(|l| l.contains("\"params_loaded\":0")));
    assert_eq!(molkv(&["export", "--manifest", ms]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: Value = serde_json::from_str(
        &std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("manifests/tiny-molkv.json")).unwrap(),
    )
    .unwrap();
    v["model"]["top_k"] = 0.into();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = molkv(&["cost", "--manifest", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.top_k"));
    let o = molkv(&["verify", "--only", "AC99"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cost_reports_reference_closed_forms() {
    let m = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("manifests/molkv-reference.json");
    let o = molkv(&["cost", "--manifest", m.to_str().unwrap()]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["per_expert_layer"]["macs"], 8_159_232u64);
    assert_eq!(v["per_expert_layer"]["loaded"], 2_340);
    assert_eq!(v["per_expert_layer"]["ram"], 3 * 1024 * 2548 + 1_198_080u64);
    assert_eq!(v["param_counts"]["experts-only"], 1_647_959_040u64);
    assert_eq!(v["bytes_loaded_per_token"]["fp32"], 14 * 9_360);
}

#[test]
fn verify_subset_passes() {
    let o = molkv(&["verify", "--only", "AC5", "--only", "ac7"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().all(|l| l.starts_with("[PASS]")));
}
