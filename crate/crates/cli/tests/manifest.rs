use std::path::PathBuf;

use molkv_cli::{CliError, RunManifest};
use molkv_core::ModelKind;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("manifests").join(name)
}

fn key_of(e: CliError) -> String {
    match e {
        CliError::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn reference_manifest_parses_to_reference_config() {
    let m = RunManifest::load(&shipped("molkv-reference.json")).unwrap();
    let c = &m.model;
    assert_eq!(m.kind, ModelKind::Molkv);
    assert_eq!((c.d_model, c.d_ff, c.n_experts, c.key_dim, c.window, c.top_k), (1024, 2548, 2, 146, 512, 32));
    assert_eq!(c.expert_layers, (0..14).collect::<Vec<_>>());
    assert_eq!(c.vocab_size, 50304);
    assert_eq!(*c, molkv_core::ModelConfig::reference_molkv());
}

#[test]
fn every_shipped_manifest_is_valid() {
    for entry in std::fs::read_dir(shipped("")).unwrap() {
        let path = entry.unwrap().path();
        RunManifest::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn omitted_train_keys_take_defaults() {
    let m = RunManifest::load(&shipped("molkv-reference.json")).unwrap();
    let t = &m.train;
    assert_eq!(t.warmup_steps, 200);
    assert_eq!((t.seq_length, t.batch_size, t.grad_accum, t.steps), (2048, 8, 30, 20_000));
    assert_eq!((t.lr, t.min_lr, t.weight_decay, t.grad_clip), (3e-4, 3e-6, 0.1, 1.0));
    assert_eq!(t.betas, [0.9, 0.95]);
    assert_eq!((t.adam_eps, t.init_std), (1e-8, 0.02));
    let echo: serde_json::Value = serde_json::from_str(&m.echo()).unwrap();
    assert_eq!(echo["train"]["warmup_steps"], 200);
    assert_eq!(RunManifest::from_json(&m.echo()).unwrap(), m);
}

fn tiny_molkv() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(shipped("tiny-molkv.json")).unwrap()).unwrap()
}

#[test]
fn molkv_with_zero_top_k_names_the_key() {
    let mut v = tiny_molkv();
    v["model"]["top_k"] = 0.into();
    assert_eq!(key_of(RunManifest::from_json(&v.to_string()).unwrap_err()), "model.top_k");
}

#[test]
fn mole_with_key_dim_names_the_key() {
    let mut v = tiny_molkv();
    v["kind"] = "mole".into();
    assert_eq!(key_of(RunManifest::from_json(&v.to_string()).unwrap_err()), "model.key_dim");
}

#[test]
fn unknown_and_missing_keys_are_rejected() {
    let mut v = tiny_molkv();
    v["model"]["bogus"] = 1.into();
    assert_eq!(key_of(RunManifest::from_json(&v.to_string()).unwrap_err()), "model.bogus");

    let mut v = tiny_molkv();
    v["train"]["learning_rate"] = 1.into();
    assert_eq!(key_of(RunManifest::from_json(&v.to_string()).unwrap_err()), "train.learning_rate");

    let mut v = tiny_molkv();
    v["extra"] = 1.into();
    assert_eq!(key_of(RunManifest::from_json(&v.to_string()).unwrap_err()), "extra");

    let mut v = tiny_molkv();
    v["model"].as_object_mut().unwrap().remove("d_model");
    assert_eq!(key_of(RunManifest::from_json(&v.to_string()).unwrap_err()), "model.d_model");

    let mut v = tiny_molkv();
    v.as_object_mut().unwrap().remove("kind");
    assert_eq!(key_of(RunManifest::from_json(&v.to_string()).unwrap_err()), "kind");
}

#[test]
fn inconsistent_schedule_names_the_key() {
    let mut v = tiny_molkv();
    v["train"]["steps"] = 5.into();
    assert_eq!(key_of(RunManifest::from_json(&v.to_string()).unwrap_err()), "train.warmup_steps");
}
