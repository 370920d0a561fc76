//! Store-backed incremental decoding and cost accounting.
//!
//! MACs count only the large matrix operations of the feed-forward and expert
//! paths: `3dD` for the FFN and, in MoLKV layers, `dd′` for the query
//! projection, `mNd′` for cached key scores and `k·d` for the selected values.
//! Attention, the output head, norms, gates, softmaxes and RoPE are excluded.

use std::ops::AddAssign;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::expertstore::{ExpertSource, StoreKind};
use crate::layers::{causal_attention_step, rmsnorm, swishglu_ffn, AttnCache};
use crate::model::{InferBlock, InferenceModel};
use crate::molkv::{self, ExpertKv, KvExpertCache};
use crate::mole;
use crate::numerics::kernels::{matvec, softmax_slice};

/// Aggregate cost counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub macs: u64,
    pub params_in_ram: u64,
    pub params_offloaded: u64,
    pub params_loaded: u64,
    pub bytes_loaded: u64,
}

impl AddAssign for CostCounters {
    fn add_assign(&mut self, o: Self) {
        self.macs += o.macs;
        self.params_in_ram += o.params_in_ram;
        self.params_offloaded += o.params_offloaded;
        self.params_loaded += o.params_loaded;
        self.bytes_loaded += o.bytes_loaded;
    }
}

/// Costs of one layer for one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub token_index: usize,
    pub layer: usize,
    pub macs: u64,
    pub params_loaded: u64,
    pub bytes_loaded: u64,
    /// KV expert cache length `m` seen by the token (0 outside MoLKV layers).
    pub cache_len: usize,
    /// FFN weights plus cached experts held in memory for this layer.
    pub params_in_ram: u64,
    /// Per-layer expert table size in slow storage.
    pub params_offloaded: u64,
}

impl LayerCost {
    pub fn counters(&self) -> CostCounters {
        CostCounters {
            macs: self.macs,
            params_in_ram: self.params_in_ram,
            params_offloaded: self.params_offloaded,
            params_loaded: self.params_loaded,
            bytes_loaded: self.bytes_loaded,
        }
    }
}

/// Steady-state per-layer row of the cost table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub macs: u64,
    pub ram: u64,
    pub offloaded: u64,
    pub loaded: u64,
}

/// Closed-form per-layer costs of an expert layer (or any layer, for Dense).
pub fn closed_form_costs(cfg: &ModelConfig) -> CostRow {
    let (d, ff, n, v) = (cfg.d_model as u64, cfg.d_ff as u64, cfg.n_experts as u64, cfg.vocab_size as u64);
    let ffn = 3 * d * ff;
    match cfg.kind {
        ModelKind::Dense => CostRow { macs: ffn, ram: ffn, offloaded: 0, loaded: 0 },
        ModelKind::Mole | ModelKind::GatedMole => CostRow {
            macs: ffn,
            ram: ffn,
            offloaded: n * v * d,
            loaded: n * d,
        },
        ModelKind::Molkv => {
            let (dk, m, k) = (cfg.key_dim as u64, cfg.window as u64, cfg.top_k as u64);
            CostRow {
                macs: ffn + d * dk + m * n * dk + k * d,
                ram: ffn + m * n * (d + dk),
                offloaded: n * v * (d + dk),
                loaded: n * (d + dk),
            }
        }
    }
}

/// Per-sequence decoding state.
#[derive(Clone, Debug)]
pub struct DecoderState {
    attn: Vec<AttnCache>,
    kv: Vec<Option<KvExpertCache>>,
    position: usize,
}

impl DecoderState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            attn: vec![AttnCache::default(); cfg.n_layers],
            kv: (0..cfg.n_layers)
                .map(|l| {
                    (cfg.kind == ModelKind::Molkv && cfg.is_expert_layer(l)).then(|| KvExpertCache::for_config(cfg))
                })
                .collect(),
            position: 0,
        }
    }

    /// Position of the next token.
    pub fn position(&self) -> usize {
        self.position
    }

    /// KV expert cache length of each MoLKV layer.
    pub fn kv_lens(&self) -> Vec<usize> {
        self.kv.iter().flatten().map(|c| c.len()).collect()
    }
}

/// Output of one decode step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub layers: Vec<LayerCost>,
    pub total: CostCounters,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Result of [`Decoder::generate`].
#[derive(Clone, Debug)]
pub struct Generation {
    /// Newly produced tokens (the prompt is not repeated).
    pub tokens: Vec<usize>,
    /// Per-layer costs of every decoded token, prompt included.
    pub costs: Vec<LayerCost>,
    pub total: CostCounters,
    pub last_logits: Vec<f64>,
}

/// An inference model bound to its expert source.
pub struct Decoder<'a> {
    model: &'a InferenceModel,
    store: Option<&'a dyn ExpertSource>,
}

impl<'a> Decoder<'a> {
    /// Checks that `store` matches the model's expert layers.
    pub fn new(model: &'a InferenceModel, store: Option<&'a dyn ExpertSource>) -> Result<Self> {
        let cfg = &model.config;
        match (cfg.kind.has_experts(), store) {
            (false, _) => {}
            (true, None) => return Err(Error::Contract(format!("{} model needs an expert store", cfg.kind))),
            (true, Some(s)) => {
                let h = s.header();
                let kind = if cfg.kind == ModelKind::Molkv { StoreKind::Molkv } else { StoreKind::Mole };
                let want = (kind, cfg.n_expert_layers(), cfg.vocab_size, cfg.n_experts, cfg.d_model, cfg.key_dim);
                let got = (h.kind, h.n_layers, h.vocab, h.n_experts, h.d, h.key_dim);
                if want != got {
                    return Err(Error::Contract(format!(
                        "store header {got:?} does not match model {want:?}"
                    )));
                }
            }
        }
        Ok(Self { model, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn new_state(&self) -> DecoderState {
        DecoderState::new(&self.model.config)
    }

    /// Advances `state` by one token and returns next-token logits.
    pub fn decode_step(&self, state: &mut DecoderState, token: usize) -> Result<StepOutput> {
        let m = self.model;
        let cfg = &m.config;
        if token >= cfg.vocab_size {
            return Err(Error::Lookup(format!("token {token} out of range for vocabulary {}", cfg.vocab_size)));
        }
        let (d, ff) = (cfg.d_model as u64, cfg.d_ff as u64);
        let eps = cfg.norm_eps;
        let t = state.position;
        let row = closed_form_costs(cfg);
        let mut x = m.embed.row_slice(token).to_vec();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut total = CostCounters::default();

        for (l, layer) in m.layers.iter().enumerate() {
            let xn = rmsnorm(&x, layer.attn_norm.data(), eps);
            let a = causal_attention_step(&xn, &layer.attn, &mut state.attn[l], cfg.heads(), cfg.rope_theta)?;
            let resid: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            let h = rmsnorm(&resid, layer.ffn_norm.data(), eps);
            let f = swishglu_ffn(&h, &layer.ffn);
            let mut y: Vec<f64> = resid.iter().zip(&f).map(|(p, q)| p + q).collect();

            let mut cost = LayerCost {
                token_index: t,
                layer: l,
                macs: 3 * d * ff,
                params_loaded: 0,
                bytes_loaded: 0,
                cache_len: 0,
                params_in_ram: 3 * d * ff,
                params_offloaded: 0,
            };
            if let Some(block) = &layer.block {
                let store = self.store.expect("checked in Decoder::new");
                let slot = cfg.expert_slot(l).expect("block implies expert layer");
                let record = store.fetch(slot, token)?;
                let h_info = store.header();
                cost.params_loaded = h_info.record_params() as u64;
                cost.bytes_loaded = h_info.record_bytes() as u64;
                cost.params_offloaded = row.offloaded;
                match block {
                    InferBlock::Mole(b) => {
                        let e = mole::expert_term(&h, &record.values_flat(), b);
                        y.iter_mut().zip(&e).for_each(|(p, q)| *p += q);
                    }
                    InferBlock::Molkv(p) => {
                        let experts: Vec<ExpertKv> = (0..record.n_experts)
                            .map(|n| {
                                ExpertKv::from_stored(
                                    record.key(n).to_vec(),
                                    record.value(n).to_vec(),
                                    &p.value_norm,
                                    eps,
                                )
                            })
                            .collect();
                        let cache = state.kv[l].as_mut().expect("MoLKV layer has a cache");
                        let (own, new, mlen, sel) =
                            molkv::infer_expert_terms(&h, t, cache, &experts, p, cfg.top_k, cfg.rope_theta)?;
                        for ((yy, o), nn) in y.iter_mut().zip(&own).zip(&new) {
                            *yy += o + nn;
                        }
                        let (n, dk) = (cfg.n_experts as u64, cfg.key_dim as u64);
                        let mm = mlen as u64;
                        cost.macs += d * dk + mm * n * dk + sel.indices.len() as u64 * d;
                        cost.params_in_ram += mm * n * (d + dk);
                        cost.cache_len = mlen;
                    }
                }
            }
            total += cost.counters();
            layers.push(cost);
            x = y;
        }
        let xn = rmsnorm(&x, m.final_norm.data(), eps);
        let logits = matvec(&m.lm_head, &xn);
        state.position += 1;
        Ok(StepOutput { logits, layers, total })
    }

    /// Feeds `prompt`, then samples and feeds `steps` new tokens.
    pub fn generate(
        &self,
        state: &mut DecoderState,
        prompt: &[usize],
        steps: usize,
        sampler: &Sampler,
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::Contract("generation needs a nonempty prompt".into()));
        }
        let mut rng = match sampler {
            Sampler::Greedy => None,
            Sampler::Temperature { temperature, seed } => {
                if !(*temperature > 0.0) {
                    return Err(Error::config("temperature", "must be positive"));
                }
                Some(ChaCha8Rng::seed_from_u64(*seed))
            }
        };
        let mut costs = Vec::new();
        let mut total = CostCounters::default();
        let mut logits = Vec::new();
        let mut feed = |state: &mut DecoderState, tok: usize| -> Result<Vec<f64>> {
            let out = self.decode_step(state, tok)?;
            total += out.total;
            costs.extend(out.layers);
            Ok(out.logits)
        };
        for &tok in prompt {
            logits = feed(state, tok)?;
        }
        let mut tokens = Vec::with_capacity(steps);
        for _ in 0..steps {
            let next = match (sampler, rng.as_mut()) {
                (Sampler::Temperature { temperature, .. }, Some(r)) => sample(&logits, *temperature, r)?,
                _ => argmax(&logits),
            };
            tokens.push(next);
            logits = feed(state, next)?;
        }
        Ok(Generation { tokens, costs, total, last_logits: logits })
    }

    /// Generates for several prompts concurrently, one private state each.
    pub fn generate_batch(&self, prompts: &[Vec<usize>], steps: usize, sampler: &Sampler) -> Result<Vec<Generation>> {
        prompts
            .par_iter()
            .map(|p| self.generate(&mut self.new_state(), p, steps, sampler))
            .collect()
    }

    /// Logits for every position of `tokens`, decoded from a fresh state.
    pub fn logits_for(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut state = self.new_state();
        tokens.iter().map(|&t| self.decode_step(&mut state, t).map(|o| o.logits)).collect()
    }
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs = softmax_slice(&scaled);
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::State(format!("cannot sample: {e}")))?;
    Ok(dist.sample(rng))
}
