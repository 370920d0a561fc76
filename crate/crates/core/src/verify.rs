//! The acceptance suite: one check per criterion, each returning a
//! pass/fail [`Outcome`] with a one-line detail.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::expertstore::{self, ExpertTables, StoreDType, StoreHeader, StoreReader};
use crate::layers::{self, FfnParams};
use crate::model::{ExpertBlock, InferenceModel, Model};
use crate::mole;
use crate::molkv::{self, ExpertKv, KvExpertCache, MolkvInferParams};
use crate::numerics::{grad_check, relative_error, Tape, Tensor};
use crate::params::{trunc_normal, Params};
use crate::runtime::{closed_form_costs, Decoder, LayerCost};
use crate::train::{evaluate, synthetic_corpus, Corpus, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: &'static str,
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIP",
        };
        write!(
            f,
            "[{tag}] {} {}: {} ({:.2}s)",
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// A criterion: identifier, short name and check.
pub struct Criterion {
    pub id: &'static str,
    pub name: &'static str,
    check: fn() -> Result<(bool, String)>,
}

impl Criterion {
    pub fn run(&self) -> Outcome {
        let start = Instant::now();
        let (status, detail) = match (self.check)() {
            Ok((true, d)) => (Status::Pass, d),
            Ok((false, d)) => (Status::Fail, d),
            Err(e) => (Status::Fail, format!("error: {e}")),
        };
        Outcome { id: self.id, name: self.name, status, detail, elapsed: start.elapsed() }
    }

    pub fn skipped(&self, why: &str) -> Outcome {
        Outcome {
            id: self.id,
            name: self.name,
            status: Status::Skipped,
            detail: why.to_string(),
            elapsed: Duration::ZERO,
        }
    }
}

pub const CRITERIA: [Criterion; 10] = [
    Criterion { id: "AC1", name: "reparameterization equivalence", check: ac1_reparameterization },
    Criterion { id: "AC2", name: "incremental/batched equivalence", check: ac2_incremental },
    Criterion { id: "AC3", name: "gradient check", check: ac3_gradients },
    Criterion { id: "AC4", name: "cost-counter exactness", check: ac4_costs },
    Criterion { id: "AC5", name: "parameter counting", check: ac5_param_counts },
    Criterion { id: "AC6", name: "store round-trip", check: ac6_store },
    Criterion { id: "AC7", name: "rope offset invariance", check: ac7_rope },
    Criterion { id: "AC8", name: "empty/short window", check: ac8_window },
    Criterion { id: "AC9", name: "training smoke", check: ac9_training },
    Criterion { id: "AC10", name: "determinism", check: ac10_determinism },
];

/// Runs every criterion in order; `quick` skips the training smoke test.
pub fn run_all(quick: bool, mut report: impl FnMut(&Outcome)) -> Vec<Outcome> {
    CRITERIA
        .iter()
        .map(|c| {
            let o = if quick && c.id == "AC9" { c.skipped("skipped in quick mode") } else { c.run() };
            report(&o);
            o
        })
        .collect()
}

pub fn find(id: &str) -> Option<&'static Criterion> {
    CRITERIA.iter().find(|c| c.id.eq_ignore_ascii_case(id))
}

fn rvec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tiny_config(rng: &mut impl Rng, kind: ModelKind) -> ModelConfig {
    let heads = rng.random_range(1..=2usize);
    let d = [8, 16, 24, 32][rng.random_range(0..4)];
    let n_layers = rng.random_range(1..=3usize);
    let mut expert_layers: Vec<usize> = (0..n_layers).filter(|_| rng.random_bool(0.6)).collect();
    if expert_layers.is_empty() {
        expert_layers.push(rng.random_range(0..n_layers));
    }
    ModelConfig {
        kind,
        n_layers,
        d_model: d,
        d_ff: rng.random_range(4..=64),
        n_experts: rng.random_range(1..=4),
        vocab_size: rng.random_range(2..=64),
        key_dim: 0,
        window: 0,
        top_k: 0,
        expert_layers,
        n_heads: Some(heads),
        ..ModelConfig::tiny(kind)
    }
}

fn ac1_reparameterization() -> Result<(bool, String)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC1);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for c in 0..20 {
        let base = random_tiny_config(&mut rng, ModelKind::Mole);
        for kind in [ModelKind::Mole, ModelKind::GatedMole] {
            let cfg = ModelConfig { kind, ..base.clone() };
            let model = Model::init(cfg.clone(), 100 + c, 0.5)?;
            let tables = expertstore::reparameterize(&model)?;
            for (slot, &l) in cfg.expert_layers.iter().enumerate() {
                let layer = &model.params.layers[l];
                let Some(ExpertBlock::Mole(block)) = &layer.experts else {
                    return Err(Error::Contract(format!("layer {l} lacks a MoLE block")));
                };
                let table = tables.mole_table(slot)?;
                for id in 0..cfg.vocab_size {
                    let hs: Vec<Vec<f64>> = (0..10).map(|_| rvec(&mut rng, cfg.d_model)).collect();
                    let mut tape = Tape::new();
                    let h = tape.leaf(Tensor::matrix(10, cfg.d_model, hs.concat())?);
                    let emb = tape.leaf(model.params.embed.clone());
                    let ffn = layer.ffn.map_ref(&mut |t| tape.leaf(t.clone()));
                    let bv = block.map_ref(&mut |t| tape.leaf(t.clone()));
                    let ids = [id; 10];
                    let y = mole::train_forward(&mut tape, h, &ids, emb, &ffn, &bv)?;
                    let e = mole::train_expert_term(&mut tape, h, &ids, emb, &bv)?;
                    for (r, hr) in hs.iter().enumerate() {
                        let yi = mole::infer_forward(hr, id, &table, &layer.ffn, block)?;
                        let ei = mole::expert_term(hr, table.lookup(id)?, block);
                        worst = worst
                            .max(relative_error(&yi, tape.value(y).row_slice(r)))
                            .max(relative_error(&ei, tape.value(e).row_slice(r)));
                        cases += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-6 && secs < 30.0,
        format!("max rel err {worst:.2e} (tol 1e-6) over {cases} (id, h) cases in 40 models, {secs:.1}s (limit 30s)"),
    ))
}

fn ac2_incremental() -> Result<(bool, String)> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let mut worst_block = 0.0f64;
    let mut worst_model = 0.0f64;
    let mut combos = 0;
    for window in [1usize, 4, 16] {
        for top_k in [2usize, 8] {
            for n in [1usize, 2] {
                let cfg = ModelConfig {
                    n_experts: n,
                    window,
                    top_k,
                    vocab_size: 64,
                    ..ModelConfig::tiny(ModelKind::Molkv)
                };
                let seed = (window * 100 + top_k * 10 + n) as u64;
                let model = Model::init(cfg.clone(), seed, 0.4)?;
                let tables = expertstore::reparameterize(&model)?;
                let path = dir.path().join(format!("ac2-{seed}.mlkv"));
                expertstore::write_store(&tables, &path, StoreDType::Fp64)?;
                let reader = StoreReader::open(&path)?;

                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for s in [1usize, 9, 64] {
                    let ids: Vec<usize> = (0..s).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
                    let hs: Vec<f64> = rvec(&mut rng, s * cfg.d_model);
                    for (slot, &l) in cfg.expert_layers.iter().enumerate() {
                        let err = block_incremental_error(&model, l, slot, &reader, &ids, &hs)?;
                        worst_block = worst_block.max(err);
                    }
                }

                let tokens: Vec<usize> = (0..40).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
                let inf = InferenceModel::from_model(&model);
                let dec = Decoder::new(&inf, Some(&reader))?;
                let got = dec.logits_for(&tokens)?;
                let want = model.logits(&tokens)?;
                for (t, row) in got.iter().enumerate() {
                    worst_model = worst_model.max(relative_error(row, want.row_slice(t)));
                }
                combos += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = worst_block.max(worst_model);
    Ok((
        worst <= 1e-6 && secs < 60.0,
        format!(
            "max rel err block {worst_block:.2e}, full model {worst_model:.2e} (tol 1e-6) over {combos} (M, k, N) combos, {secs:.1}s (limit 60s)"
        ),
    ))
}

/// Largest per-token relative error between store-backed incremental block
/// outputs and the batched training-mode block on the same inputs.
fn block_incremental_error(
    model: &Model,
    layer: usize,
    slot: usize,
    reader: &StoreReader,
    ids: &[usize],
    hs: &[f64],
) -> Result<f64> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let lp = &model.params.layers[layer];
    let Some(ExpertBlock::Molkv(block)) = &lp.experts else {
        return Err(Error::Contract(format!("layer {layer} lacks a MoLKV block")));
    };
    let mut tape = Tape::new();
    let h = tape.leaf(Tensor::matrix(ids.len(), d, hs.to_vec())?);
    let emb = tape.leaf(model.params.embed.clone());
    let ffn = lp.ffn.map_ref(&mut |t| tape.leaf(t.clone()));
    let bv = block.map_ref(&mut |t| tape.leaf(t.clone()));
    let y = molkv::train_forward(&mut tape, h, ids, emb, &ffn, &bv, cfg)?;
    let terms = molkv::train_expert_terms(&mut tape, h, ids, emb, &bv, cfg)?;

    let params = block.infer_params();
    let mut cache = KvExpertCache::for_config(cfg);
    let mut worst = 0.0f64;
    let mut new_rows = Vec::new();
    for (t, &id) in ids.iter().enumerate() {
        let rec = reader.read_record(slot, id)?;
        let experts: Vec<ExpertKv> = (0..rec.n_experts)
            .map(|n| ExpertKv::from_stored(rec.key(n).to_vec(), rec.value(n).to_vec(), &params.value_norm, cfg.norm_eps))
            .collect();
        let step = molkv::infer_forward(&hs[t * d..(t + 1) * d], t, &mut cache, &experts, &lp.ffn, &params, cfg)?;
        worst = worst
            .max(relative_error(&step.y, tape.value(y).row_slice(t)))
            .max(relative_error(&step.expert_output, tape.value(terms.expert_output).row_slice(t)));
        new_rows.extend(step.new_expert_output);
    }
    Ok(worst.max(relative_error(&new_rows, tape.value(terms.new_expert_output).data())))
}

fn ac3_gradients() -> Result<(bool, String)> {
    let cfg = ModelConfig {
        d_model: 8,
        d_ff: 12,
        key_dim: 4,
        n_experts: 2,
        vocab_size: 10,
        window: 3,
        top_k: 4,
        n_heads: Some(1),
        n_layers: 1,
        expert_layers: vec![0],
        ..ModelConfig::tiny(ModelKind::Molkv)
    };
    let model = Model::init(cfg.clone(), 33, 0.5)?;
    let lp = &model.params.layers[0];
    let Some(ExpertBlock::Molkv(block)) = &lp.experts else {
        return Err(Error::Contract("missing MoLKV block".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = 7;
    let ids: Vec<usize> = (0..s).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let h = Tensor::matrix(s, 8, rvec(&mut rng, s * 8))?;
    let w = Tensor::matrix(s, 8, rvec(&mut rng, s * 8))?;

    let mut leaves = vec![h, model.params.embed.clone(), w];
    let mut names = vec!["h".to_string(), "embed".to_string(), "loss weights".to_string()];
    for (n, t) in lp.ffn.named_leaves() {
        names.push(format!("ffn.{n}"));
        leaves.push(t.clone());
    }
    for (n, t) in block.named_leaves() {
        names.push(n);
        leaves.push(t.clone());
    }
    let n_ffn = lp.ffn.leaves().len();
    let ffn_shape = lp.ffn.clone();
    let block_shape = block.clone();
    let cfg2 = cfg.clone();
    let report = grad_check(
        move |tape, vars| {
            let mut it = vars[3..3 + n_ffn].iter().copied();
            let ffn: FfnParams<_> = ffn_shape.map_ref(&mut |_| it.next().unwrap());
            let mut it = vars[3 + n_ffn..].iter().copied();
            let bv = block_shape.map_ref(&mut |_| it.next().unwrap());
            let y = molkv::train_forward(tape, vars[0], &ids, vars[1], &ffn, &bv, &cfg2)?;
            let yw = tape.mul(y, vars[2])?;
            Ok(tape.sum(yw))
        },
        &leaves,
        1e-5,
    )?;
    let (worst_i, worst) = report
        .per_leaf
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0f64), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok((
        report.max_rel_err <= 1e-4,
        format!(
            "max rel err {:.2e} (tol 1e-4) over {} coordinates in {} parameter groups; worst group `{}`",
            worst,
            report.coords_checked,
            leaves.len(),
            names[worst_i]
        ),
    ))
}

fn steady_layer_cost(cfg: &ModelConfig, dtype: StoreDType) -> Result<LayerCost> {
    let model = InferenceModel::random(cfg.clone(), 44, 0.02)?;
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let reader;
    let store: Option<&dyn expertstore::ExpertSource> = if cfg.kind.has_experts() {
        let header = StoreHeader::for_config(cfg, StoreDType::Fp64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let data = rvec(&mut rng, header.n_records() * header.record_params());
        let tables = ExpertTables::new(header, data)?;
        let path = dir.path().join("ac4.mlkv");
        expertstore::write_store(&tables, &path, dtype)?;
        reader = StoreReader::open(&path)?;
        Some(&reader)
    } else {
        None
    };
    let dec = Decoder::new(&model, store)?;
    let mut state = dec.new_state();
    let warm = if cfg.kind == ModelKind::Molkv { cfg.window } else { 0 };
    let mut last = None;
    for t in 0..=warm {
        let out = dec.decode_step(&mut state, (t * 31) % cfg.vocab_size)?;
        last = Some(out.layers[0]);
    }
    Ok(last.expect("at least one step"))
}

fn ac4_costs() -> Result<(bool, String)> {
    let shrink = |c: ModelConfig| ModelConfig {
        n_layers: 1,
        vocab_size: 512,
        expert_layers: if c.kind.has_experts() { vec![0] } else { Vec::new() },
        ..c
    };
    let molkv = steady_layer_cost(&shrink(ModelConfig::reference_molkv()), StoreDType::Fp32)?;
    let mole = steady_layer_cost(&shrink(ModelConfig::reference_mole()), StoreDType::Fp32)?;
    let gated = steady_layer_cost(&shrink(ModelConfig::reference_gated_mole()), StoreDType::Fp32)?;
    let dense = steady_layer_cost(&shrink(ModelConfig::reference_dense()), StoreDType::Fp32)?;
    let ffn_molkv = 3 * 1024 * 2548u64;
    let full = closed_form_costs(&ModelConfig::reference_molkv());
    let checks = [
        ("MoLKV macs", molkv.macs, 8_159_232),
        ("MoLKV macs vs closed form", molkv.macs, full.macs),
        ("MoLKV loaded", molkv.params_loaded, 2_340),
        ("MoLKV bytes fp32", molkv.bytes_loaded, 9_360),
        ("MoLKV cached RAM", molkv.params_in_ram - ffn_molkv, 1_198_080),
        ("MoLKV RAM vs closed form", molkv.params_in_ram, full.ram),
        ("MoLKV cache length", molkv.cache_len as u64, 512),
        ("MoLE macs", mole.macs, 8_122_368),
        ("MoLE loaded", mole.params_loaded, 2_048),
        ("Gated MoLE macs", gated.macs, 8_122_368),
        ("Dense macs", dense.macs, 8_122_368),
        ("Dense loaded", dense.params_loaded, 0),
    ];
    let failed: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(n, got, want)| format!("{n}: {got} != {want}"))
        .collect();
    let detail = if failed.is_empty() {
        format!(
            "steady-state MoLKV macs {}, loaded {}, cached RAM {}; Dense/MoLE macs {}",
            molkv.macs,
            molkv.params_loaded,
            molkv.params_in_ram - ffn_molkv,
            dense.macs
        )
    } else {
        failed.join("; ")
    };
    Ok((failed.is_empty(), detail))
}

fn ac5_param_counts() -> Result<(bool, String)> {
    use expertstore::{count_params, ParamConvention::ExpertsOnly};
    let mole = count_params(&ModelConfig::reference_mole(), ExpertsOnly);
    let molkv = count_params(&ModelConfig::reference_molkv(), ExpertsOnly);
    // Reported total for both expert models: 1.65B.
    let billions = |x: u64| (x as f64 / 1e7).round() / 100.0;
    let ok = mole == 1_648_361_472 && molkv == 1_647_959_040 && billions(mole) == 1.65 && billions(molkv) == 1.65;
    Ok((
        ok,
        format!(
            "experts-only MoLE {mole} ({:.2}B), MoLKV {molkv} ({:.2}B); reported 1.65B",
            billions(mole),
            billions(molkv)
        ),
    ))
}

fn ac6_store() -> Result<(bool, String)> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let mut records = 0usize;
    let mut problems = Vec::new();
    for kind in [ModelKind::Mole, ModelKind::Molkv] {
        let model = Model::init(ModelConfig::tiny(kind), 60, 0.5)?;
        let tables = expertstore::reparameterize(&model)?;
        for dtype in [StoreDType::Fp32, StoreDType::Fp16] {
            let path = dir.path().join(format!("ac6-{kind}-{dtype:?}.mlkv"));
            let header = expertstore::write_store(&tables, &path, dtype)?;
            let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let reader = StoreReader::open(&path)?;
            for l in 0..header.n_layers {
                for id in 0..header.vocab {
                    let before = reader.bytes_read();
                    let rec = reader.read_record(l, id)?;
                    let moved = reader.bytes_read() - before;
                    if moved != header.record_bytes() as u64 {
                        problems.push(format!("{kind} ({l},{id}) read {moved} bytes"));
                    }
                    let want = tables.record(l, id)?;
                    let off = 64 + (l * header.vocab + id) * header.record_bytes();
                    let bytes = &raw[off..off + header.record_bytes()];
                    let exact = match dtype {
                        StoreDType::Fp32 => rec.data.iter().zip(&want.data).zip(bytes.chunks_exact(4)).all(
                            |((&r, &w), b)| {
                                let f = f32::from_le_bytes(b.try_into().unwrap());
                                f.to_bits() == (w as f32).to_bits() && r.to_bits() == (f as f64).to_bits()
                            },
                        ),
                        StoreDType::Fp16 => rec.data.iter().zip(&want.data).zip(bytes.chunks_exact(2)).all(
                            |((&r, &w), b)| {
                                let f = half::f16::from_le_bytes([b[0], b[1]]);
                                f.to_bits() == half::f16::from_f64(w).to_bits() && r.to_bits() == f.to_f64().to_bits()
                            },
                        ),
                        StoreDType::Fp64 => unreachable!(),
                    };
                    if !exact {
                        problems.push(format!("{kind} {dtype:?} ({l},{id}) differs"));
                    }
                    records += 1;
                }
            }
            if reader.reads() != header.n_records() as u64 {
                problems.push(format!("{kind} {dtype:?}: {} reads", reader.reads()));
            }
        }
    }
    let ok = problems.is_empty();
    let detail = if ok {
        format!("{records} records bit-exact at fp32 and fp16, one record of bytes per read")
    } else {
        problems.into_iter().take(5).collect::<Vec<_>>().join("; ")
    };
    Ok((ok, detail))
}

fn ac7_rope() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q = rvec(&mut rng, 146);
        let k = rvec(&mut rng, 146);
        let (tq, tk) = (rng.random_range(0..4096usize), rng.random_range(0..4096usize));
        let delta = rng.random_range(0..8192usize);
        let score = |a: usize, b: usize| -> Result<f64> {
            let qa = layers::rope(&q, a, 1e4)?;
            let kb = layers::rope(&k, b, 1e4)?;
            Ok(qa.iter().zip(&kb).map(|(x, y)| x * y).sum::<f64>() / 146f64.sqrt())
        };
        let (s0, s1) = (score(tq, tk)?, score(tq + delta, tk + delta)?);
        worst = worst.max((s0 - s1).abs() / s0.abs().max(1.0));
    }
    Ok((worst <= 1e-10, format!("max deviation {worst:.2e} (tol 1e-10) over 100 (q, k, Δ) triples")))
}

fn random_infer_params(rng: &mut impl Rng, d: usize, dk: usize, n: usize) -> MolkvInferParams {
    MolkvInferParams {
        query: trunc_normal(rng, &[dk, d], 0.5),
        router: trunc_normal(rng, &[n, d], 0.5),
        new_router: trunc_normal(rng, &[n, d], 0.5),
        gate: trunc_normal(rng, &[1, d], 0.5),
        new_gate: trunc_normal(rng, &[1, d], 0.5),
        value_norm: Tensor::full(&[d], 1.0),
    }
}

fn ac8_window() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d, dk, n, k, window) = (16, 8, 2, 8, 16);
    let params = random_infer_params(&mut rng, d, dk, n);
    let mut problems = Vec::new();
    let mut short_steps = 0;
    for trial in 0..10 {
        let mut cache = KvExpertCache::new(window, 1e4);
        for t in 0..window {
            let h = rvec(&mut rng, d);
            let experts: Vec<ExpertKv> = (0..n)
                .map(|_| ExpertKv::from_stored(rvec(&mut rng, dk), rvec(&mut rng, d), &params.value_norm, 1e-8))
                .collect();
            let (_, new, m, sel) = molkv::infer_expert_terms(&h, t, &mut cache, &experts, &params, k, 1e4)?;
            if t == 0 && new.iter().any(|&v| v != 0.0) {
                problems.push(format!("trial {trial}: nonzero new-expert output at position 0"));
            }
            if m * n < k {
                short_steps += 1;
                let mut idx = sel.indices.clone();
                idx.sort_unstable();
                if idx != (0..m * n).collect::<Vec<_>>() {
                    problems.push(format!("trial {trial} t={t}: selected {:?} of {}", sel.indices, m * n));
                }
                let sum: f64 = sel.weights.iter().sum();
                if m > 0 && (sum - 1.0).abs() > 1e-12 {
                    problems.push(format!("trial {trial} t={t}: weights sum to {sum}"));
                }
            }
        }
    }
    let ok = problems.is_empty();
    let detail = if ok {
        format!("position 0 exactly zero in 10 sequences; {short_steps} short-window steps selected all m·N candidates with unit weight")
    } else {
        problems.into_iter().take(3).collect::<Vec<_>>().join("; ")
    };
    Ok((ok, detail))
}

/// Settings of the scaled training run.
pub fn smoke_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seq_length: 64,
        batch_size: 8,
        grad_accum: 1,
        steps: 400,
        warmup_steps: 20,
        lr: 3e-3,
        min_lr: 3e-4,
        weight_decay: 0.1,
        seed,
        val_fraction: 0.05,
        ..TrainConfig::default()
    }
}

/// Trains one model on a single 32-token sample and returns its final loss on it.
pub fn overfit_single_sample(kind: ModelKind, steps: usize) -> Result<f64> {
    let sample: Vec<usize> = synthetic_corpus(32, 99).into_iter().map(usize::from).collect();
    let cfg = TrainConfig {
        seq_length: 31,
        batch_size: 1,
        grad_accum: 1,
        steps,
        warmup_steps: 10,
        lr: 1e-2,
        min_lr: 1e-3,
        weight_decay: 0.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(ModelConfig::tiny(kind), cfg)?;
    let batch = vec![sample.clone()];
    for _ in 0..steps {
        t.step_on(&batch)?;
    }
    evaluate(&t.model, &sample, 31)
}

fn ac9_training() -> Result<(bool, String)> {
    let start = Instant::now();
    let corpus = Corpus::from_bytes(&synthetic_corpus(2_000_000, 2024), 0.05)?;
    let baseline = (256f64).ln();
    let threshold = 0.7 * baseline;
    let eval_tokens = &corpus.validation()[..corpus.validation().len().min(16_385)];
    let results: Vec<(ModelKind, f64)> = ModelKind::ALL
        .par_iter()
        .map(|&kind| {
            let mut t = Trainer::new(ModelConfig::tiny(kind), smoke_train_config(1))?;
            let steps = t.config.steps;
            t.run(&corpus, steps, |_, _| Ok(()))?;
            Ok((kind, evaluate(&t.model, eval_tokens, 64)?))
        })
        .collect::<Result<_>>()?;
    let overfit = overfit_single_sample(ModelKind::Molkv, 300)?;
    let secs = start.elapsed().as_secs_f64();
    let table: Vec<String> = results.iter().map(|(k, l)| format!("{k} {l:.4}")).collect();
    let ok = results.iter().all(|(_, l)| *l <= threshold) && overfit < 0.05 && secs < 900.0;
    Ok((
        ok,
        format!(
            "val loss [{}] vs threshold {threshold:.4} (ln 256 = {baseline:.4}); overfit loss {overfit:.4} (< 0.05); {secs:.0}s (limit 900s)",
            table.join(", ")
        ),
    ))
}

fn ac10_determinism() -> Result<(bool, String)> {
    let corpus = Corpus::from_bytes(&synthetic_corpus(50_000, 10), 0.05)?;
    let cfg = TrainConfig { steps: 13, warmup_steps: 2, seq_length: 32, batch_size: 2, grad_accum: 2, ..smoke_train_config(3) };
    let mut identical = true;
    let mut resumed_ok = true;
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    for kind in ModelKind::ALL {
        let mut a = Trainer::new(ModelConfig::tiny(kind), cfg.clone())?;
        let mut b = Trainer::new(ModelConfig::tiny(kind), cfg.clone())?;
        a.run(&corpus, 13, |_, _| Ok(()))?;
        b.run(&corpus, 13, |_, _| Ok(()))?;
        identical &= a.checkpoint_bytes()? == b.checkpoint_bytes()?;

        let mut c = Trainer::new(ModelConfig::tiny(kind), cfg.clone())?;
        c.run(&corpus, 3, |_, _| Ok(()))?;
        let path = dir.path().join(format!("ac10-{kind}.ckpt"));
        c.save(&path)?;
        let mut r = Trainer::load(&path)?;
        r.run(&corpus, 13, |_, _| Ok(()))?;
        resumed_ok &= r.checkpoint_bytes()? == a.checkpoint_bytes()?;
    }
    Ok((
        identical && resumed_ok,
        format!(
            "repeat runs bit-identical: {identical}; save at 3, reload, continue to 13 bit-identical: {resumed_ok} (all four kinds)"
        ),
    ))
}
