//! The MoLKV block.
//!
//! Each token id owns `N` key–value experts. A token's output mixes its own
//! experts through routing scores augmented by query–key similarity, and adds
//! a second, separately gated term that attends over the experts cached from
//! the preceding `M` tokens (top-k over `m·N` candidates).
//!
//! Two routes compute the same function:
//! * [`train_forward`] records a whole sequence on a tape, recomputing every
//!   expert from the token embeddings;
//! * [`infer_forward`] processes one token against a [`KvExpertCache`] using
//!   experts fetched from a store.
//!
//! Conventions shared by both routes:
//! * the window for position `t` is `[t − M, t − 1]`; the current token's
//!   experts reach the output only through the own-id path;
//! * an empty window contributes an exactly zero new-expert term;
//! * the own-id routing uses the unrotated query and keys, the cached path
//!   uses rotated ones;
//! * candidates are flattened slot-major, `j·N + n`.

use std::collections::VecDeque;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{rmsnorm, swishglu_ffn, swishglu_ffn_on_tape, FfnParams};
use crate::numerics::kernels::{self, dot, matvec};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{join, trunc_normal, Params};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct MolkvBlockParams<T> {
    /// Query projection `W_q`, `[d′, d]`.
    pub query: T,
    /// Own-id routers `r_n` as rows, `[N, d]`.
    pub router: T,
    /// Cached-expert router `W_r`, `[N, d]`.
    pub new_router: T,
    /// `u`, `[1, d]`.
    pub gate: T,
    /// `u′`, `[1, d]`.
    pub new_gate: T,
    /// `N` experts mapping `d → d′`.
    pub key_experts: Vec<FfnParams<T>>,
    /// `N` experts mapping `d → d`.
    pub value_experts: Vec<FfnParams<T>>,
    /// RMSNorm gain applied to token embeddings before the experts, `[d]`.
    pub vocab_norm: T,
    /// `[d′]`
    pub key_norm: T,
    /// `[d]`
    pub value_norm: T,
}

impl MolkvBlockParams<Tensor> {
    pub fn init(rng: &mut impl Rng, cfg: &ModelConfig, std: f64) -> Self {
        let (d, dk, n) = (cfg.d_model, cfg.key_dim, cfg.n_experts);
        Self {
            query: trunc_normal(rng, &[dk, d], std),
            router: trunc_normal(rng, &[n, d], std),
            new_router: trunc_normal(rng, &[n, d], std),
            gate: trunc_normal(rng, &[1, d], std),
            new_gate: trunc_normal(rng, &[1, d], std),
            key_experts: (0..n).map(|_| FfnParams::init(rng, d, cfg.d_ff, dk, std)).collect(),
            value_experts: (0..n).map(|_| FfnParams::init(rng, d, cfg.d_ff, d, std)).collect(),
            vocab_norm: Tensor::full(&[d], 1.0),
            key_norm: Tensor::full(&[dk], 1.0),
            value_norm: Tensor::full(&[d], 1.0),
        }
    }

    /// The subset of weights the decoder needs once experts live in a store.
    pub fn infer_params(&self) -> MolkvInferParams {
        MolkvInferParams {
            query: self.query.clone(),
            router: self.router.clone(),
            new_router: self.new_router.clone(),
            gate: self.gate.clone(),
            new_gate: self.new_gate.clone(),
            value_norm: self.value_norm.clone(),
        }
    }
}

impl<T: 'static> Params<T> for MolkvBlockParams<T> {
    type With<U> = MolkvBlockParams<U>;

    fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> MolkvBlockParams<U> {
        MolkvBlockParams {
            query: f(&self.query),
            router: f(&self.router),
            new_router: f(&self.new_router),
            gate: f(&self.gate),
            new_gate: f(&self.new_gate),
            key_experts: self.key_experts.map_ref(f),
            value_experts: self.value_experts.map_ref(f),
            vocab_norm: f(&self.vocab_norm),
            key_norm: f(&self.key_norm),
            value_norm: f(&self.value_norm),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(join(prefix, "query"), &self.query);
        f(join(prefix, "router"), &self.router);
        f(join(prefix, "new_router"), &self.new_router);
        f(join(prefix, "gate"), &self.gate);
        f(join(prefix, "new_gate"), &self.new_gate);
        self.key_experts.visit(&join(prefix, "key_experts"), f);
        self.value_experts.visit(&join(prefix, "value_experts"), f);
        f(join(prefix, "vocab_norm"), &self.vocab_norm);
        f(join(prefix, "key_norm"), &self.key_norm);
        f(join(prefix, "value_norm"), &self.value_norm);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(join(prefix, "query"), &mut self.query);
        f(join(prefix, "router"), &mut self.router);
        f(join(prefix, "new_router"), &mut self.new_router);
        f(join(prefix, "gate"), &mut self.gate);
        f(join(prefix, "new_gate"), &mut self.new_gate);
        self.key_experts.visit_mut(&join(prefix, "key_experts"), f);
        self.value_experts.visit_mut(&join(prefix, "value_experts"), f);
        f(join(prefix, "vocab_norm"), &mut self.vocab_norm);
        f(join(prefix, "key_norm"), &mut self.key_norm);
        f(join(prefix, "value_norm"), &mut self.value_norm);
    }
}

/// Inference-time MoLKV weights; expert FFNs and the embedding/key norms are
/// folded into the stored experts.
#[derive(Clone, Debug, PartialEq)]
pub struct MolkvInferParams {
    pub query: Tensor,
    pub router: Tensor,
    pub new_router: Tensor,
    pub gate: Tensor,
    pub new_gate: Tensor,
    pub value_norm: Tensor,
}

impl MolkvInferParams {
    pub fn key_dim(&self) -> usize {
        self.query.shape()[0]
    }

    pub fn qk_scale(&self) -> f64 {
        1.0 / (self.key_dim() as f64).sqrt()
    }
}

/// One key–value expert of a token id.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertKv {
    /// Post key-norm, unrotated, length `d′`.
    pub key: Vec<f64>,
    /// Raw value expert output, length `d`.
    pub value_raw: Vec<f64>,
    /// `rmsnorm(value_raw)` with the value-norm gain.
    pub value_normed: Vec<f64>,
}

impl ExpertKv {
    /// Builds an expert from its stored key and raw value.
    pub fn from_stored(key: Vec<f64>, value_raw: Vec<f64>, value_norm: &Tensor, eps: f64) -> Self {
        let value_normed = rmsnorm(&value_raw, value_norm.data(), eps);
        Self { key, value_raw, value_normed }
    }
}

/// Recomputes the `N` key–value experts of a token from its embedding.
pub fn compute_expert_kv(e: &[f64], block: &MolkvBlockParams<Tensor>, eps: f64) -> Vec<ExpertKv> {
    let e_hat = rmsnorm(e, block.vocab_norm.data(), eps);
    block
        .key_experts
        .iter()
        .zip(&block.value_experts)
        .map(|(kf, vf)| {
            let key = rmsnorm(&swishglu_ffn(&e_hat, kf), block.key_norm.data(), eps);
            ExpertKv::from_stored(key, swishglu_ffn(&e_hat, vf), &block.value_norm, eps)
        })
        .collect()
}

#[derive(Clone, Debug)]
struct CacheSlot {
    position: usize,
    /// Rotated keys, one per expert.
    keys: Vec<Vec<f64>>,
    /// Normalized values, one per expert.
    values: Vec<Vec<f64>>,
}

/// Sliding window over the key–value experts of the last `M` tokens of one sequence.
#[derive(Clone, Debug)]
pub struct KvExpertCache {
    window: usize,
    theta: f64,
    next_position: usize,
    slots: VecDeque<CacheSlot>,
}

impl KvExpertCache {
    pub fn new(window: usize, theta: f64) -> Self {
        Self::starting_at(window, theta, 0)
    }

    /// An empty cache whose first insert happens at `position`.
    pub fn starting_at(window: usize, theta: f64, position: usize) -> Self {
        Self {
            window,
            theta,
            next_position: position,
            slots: VecDeque::with_capacity(window),
        }
    }

    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self::new(cfg.window, cfg.rope_theta)
    }

    /// Current slot count `m`.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Position the next insert must carry.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().map(|s| s.position)
    }

    /// Experts per slot (0 for an empty cache).
    pub fn experts_per_slot(&self) -> usize {
        self.slots.front().map_or(0, |s| s.keys.len())
    }

    /// Rotated key of candidate `(slot j, expert n)`.
    pub fn key(&self, j: usize, n: usize) -> &[f64] {
        &self.slots[j].keys[n]
    }

    /// Normalized value of candidate `(slot j, expert n)`.
    pub fn value(&self, j: usize, n: usize) -> &[f64] {
        &self.slots[j].values[n]
    }

    /// Stores a token's experts at `position`, rotating keys, and evicts the
    /// oldest slot beyond the window.
    pub fn insert(&mut self, position: usize, experts: &[ExpertKv]) -> Result<()> {
        if position != self.next_position {
            return Err(Error::State(format!(
                "cache expects position {} but got {position}",
                self.next_position
            )));
        }
        if let Some(front) = self.slots.front() {
            if front.keys.len() != experts.len() {
                return Err(Error::Dimension(format!(
                    "cache holds {} experts per slot, insert has {}",
                    front.keys.len(),
                    experts.len()
                )));
            }
        }
        let keys = experts
            .iter()
            .map(|e| crate::layers::rope(&e.key, position, self.theta))
            .collect::<Result<Vec<_>>>()?;
        let values = experts.iter().map(|e| e.value_normed.clone()).collect();
        self.next_position = position + 1;
        if self.window == 0 {
            return Ok(());
        }
        if self.slots.len() == self.window {
            self.slots.pop_front();
        }
        self.slots.push_back(CacheSlot { position, keys, values });
        Ok(())
    }
}

/// `q = W_q h` and its rotation at `position`.
pub fn query(h: &[f64], params: &MolkvInferParams, position: usize, theta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let q = matvec(&params.query, h);
    let q_rot = crate::layers::rope(&q, position, theta)?;
    Ok((q, q_rot))
}

/// Scores of every cached candidate: `K^R q^R / sqrt(d′) + W_r h`, flattened slot-major.
pub fn new_scores(q_rot: &[f64], h: &[f64], cache: &KvExpertCache, params: &MolkvInferParams) -> Vec<f64> {
    let n = cache.experts_per_slot();
    let scale = params.qk_scale();
    let route = matvec(&params.new_router, h);
    let mut out = Vec::with_capacity(cache.len() * n);
    for j in 0..cache.len() {
        for (i, r) in route.iter().enumerate().take(n) {
            out.push(dot(cache.key(j, i), q_rot) * scale + r);
        }
    }
    out
}

/// Top-k candidates and their softmax-normalized weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Selects the `min(k, |scores|)` best candidates and normalizes their scores.
pub fn select(scores: &[f64], k: usize) -> Selection {
    let indices = kernels::topk_indices(scores, k);
    let picked: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
    let weights = kernels::softmax_slice(&picked);
    Selection { indices, weights }
}

/// Own-id routing `softmax_n(hᵀ r_n + q·k_n / sqrt(d′))` with the unrotated query and keys.
pub fn augmented_routing(h: &[f64], q: &[f64], experts: &[ExpertKv], params: &MolkvInferParams) -> Vec<f64> {
    let scale = params.qk_scale();
    let logits: Vec<f64> = matvec(&params.router, h)
        .into_iter()
        .zip(experts)
        .map(|(r, e)| r + dot(q, &e.key) * scale)
        .collect();
    kernels::softmax_slice(&logits)
}

/// Result of one incremental MoLKV step.
#[derive(Clone, Debug)]
pub struct MolkvStep {
    /// `h + FFN(h) + own-id term + new-expert term`.
    pub y: Vec<f64>,
    /// `g·Σ s_n value_raw_n`.
    pub expert_output: Vec<f64>,
    /// `g′·Σ_I S′_I V′_I`.
    pub new_expert_output: Vec<f64>,
    /// Cache length `m` seen by this token.
    pub cache_len: usize,
    pub selection: Selection,
}

/// Expert terms for one token; adds the token's experts to the cache afterwards.
pub fn infer_expert_terms(
    h: &[f64],
    position: usize,
    cache: &mut KvExpertCache,
    experts: &[ExpertKv],
    params: &MolkvInferParams,
    top_k: usize,
    theta: f64,
) -> Result<(Vec<f64>, Vec<f64>, usize, Selection)> {
    if cache.next_position() != position {
        return Err(Error::State(format!(
            "cache ends before position {} but token is at {position}",
            cache.next_position()
        )));
    }
    let d = h.len();
    let (q, q_rot) = query(h, params, position, theta)?;

    let s = augmented_routing(h, &q, experts, params);
    let g = kernels::sigmoid(dot(h, params.gate.data()));
    let mut own = vec![0.0; d];
    for (sn, e) in s.iter().zip(experts) {
        for (o, v) in own.iter_mut().zip(&e.value_raw) {
            *o += g * sn * v;
        }
    }

    let scores = new_scores(&q_rot, h, cache, params);
    let selection = select(&scores, top_k);
    let g_new = kernels::sigmoid(dot(h, params.new_gate.data()));
    let n = cache.experts_per_slot().max(1);
    let mut new = vec![0.0; d];
    for (&idx, w) in selection.indices.iter().zip(&selection.weights) {
        for (o, v) in new.iter_mut().zip(cache.value(idx / n, idx % n)) {
            *o += g_new * w * v;
        }
    }
    let m = cache.len();
    cache.insert(position, experts)?;
    Ok((own, new, m, selection))
}

/// Inference-mode block for the token at `position` with its fetched experts.
pub fn infer_forward(
    h: &[f64],
    position: usize,
    cache: &mut KvExpertCache,
    experts: &[ExpertKv],
    ffn: &FfnParams<Tensor>,
    params: &MolkvInferParams,
    cfg: &ModelConfig,
) -> Result<MolkvStep> {
    let (expert_output, new_expert_output, cache_len, selection) =
        infer_expert_terms(h, position, cache, experts, params, cfg.top_k, cfg.rope_theta)?;
    let f = swishglu_ffn(h, ffn);
    let y = (0..h.len())
        .map(|j| h[j] + f[j] + expert_output[j] + new_expert_output[j])
        .collect();
    Ok(MolkvStep { y, expert_output, new_expert_output, cache_len, selection })
}

/// Tape handles of the two expert terms of a training-mode block.
#[derive(Clone, Copy, Debug)]
pub struct MolkvTerms {
    pub expert_output: Var,
    pub new_expert_output: Var,
}

/// Window mask for a sequence of `s` tokens with `n` experts each: row `t`
/// admits candidate `j·n + i` iff `t − M ≤ j < t`.
pub fn window_mask(s: usize, n: usize, window: usize) -> Vec<bool> {
    let mut mask = vec![false; s * s * n];
    for t in 0..s {
        for j in t.saturating_sub(window)..t {
            for i in 0..n {
                mask[t * s * n + j * n + i] = true;
            }
        }
    }
    mask
}

/// Batched training-mode expert terms for one sequence of FFN inputs `h: [s, d]`.
pub fn train_expert_terms(
    tape: &mut Tape,
    h: Var,
    ids: &[usize],
    embeddings: Var,
    block: &MolkvBlockParams<Var>,
    cfg: &ModelConfig,
) -> Result<MolkvTerms> {
    let (s, _) = tape.value(h).dims2()?;
    let n = block.key_experts.len();
    let dk = tape.value(block.query).shape()[0];
    let scale = 1.0 / (dk as f64).sqrt();
    let eps = cfg.norm_eps;
    let positions: Vec<usize> = (0..s).collect();

    let q = tape.matmul_nt(h, block.query)?;
    let e = tape.gather_rows(embeddings, ids)?;
    let e_hat = tape.rmsnorm(e, block.vocab_norm, eps)?;
    let mut keys = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for (kf, vf) in block.key_experts.iter().zip(&block.value_experts) {
        let k = swishglu_ffn_on_tape(tape, e_hat, kf)?;
        keys.push(tape.rmsnorm(k, block.key_norm, eps)?);
        values.push(swishglu_ffn_on_tape(tape, e_hat, vf)?);
    }

    // Own-id experts.
    let router = tape.matmul_nt(h, block.router)?;
    let mut qk = Vec::with_capacity(n);
    for &k in &keys {
        let dk = tape.row_dot(q, k)?;
        qk.push(tape.scale(dk, scale));
    }
    let qk = if n == 1 { qk[0] } else { tape.concat_cols(&qk)? };
    let logits = tape.add(router, qk)?;
    let s_own = tape.softmax(logits)?;
    let mut own: Option<Var> = None;
    for (i, &v) in values.iter().enumerate() {
        let si = tape.slice_cols(s_own, i, 1)?;
        let term = tape.mul(v, si)?;
        own = Some(match own {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let own = own.ok_or_else(|| Error::Contract("MoLKV block has no experts".into()))?;
    let g = tape.matmul_nt(h, block.gate)?;
    let g = tape.sigmoid(g);
    let expert_output = tape.mul(own, g)?;

    // Cached experts of the preceding window.
    let q_rot = tape.rope(q, &positions, dk, cfg.rope_theta)?;
    let mut keys_rot = Vec::with_capacity(n);
    for &k in &keys {
        keys_rot.push(tape.rope(k, &positions, dk, cfg.rope_theta)?);
    }
    let k_flat = tape.interleave_rows(&keys_rot)?; // [s·n, d′]
    let qk_new = tape.matmul_nt(q_rot, k_flat)?; // [s, s·n]
    let qk_new = tape.scale(qk_new, scale);
    let route_new = tape.matmul_nt(h, block.new_router)?; // [s, n]
    let route_new = tape.tile_cols(route_new, s)?;
    let scores = tape.add(qk_new, route_new)?;

    let mut mask = window_mask(s, n, cfg.window);
    {
        let sv = tape.value(scores);
        let width = s * n;
        for t in 0..s {
            let row = &mut mask[t * width..(t + 1) * width];
            let masked: Vec<f64> = sv
                .row_slice(t)
                .iter()
                .zip(row.iter())
                .map(|(&v, &m)| if m { v } else { f64::NEG_INFINITY })
                .collect();
            let keep = kernels::topk_indices(&masked, cfg.top_k);
            row.fill(false);
            for c in keep {
                row[c] = true;
            }
        }
    }
    let weights = tape.masked_softmax(scores, mask)?;
    let mut normed = Vec::with_capacity(n);
    for &v in &values {
        normed.push(tape.rmsnorm(v, block.value_norm, eps)?);
    }
    let v_flat = tape.interleave_rows(&normed)?; // [s·n, d]
    let mixed = tape.matmul(weights, v_flat)?;
    let g_new = tape.matmul_nt(h, block.new_gate)?;
    let g_new = tape.sigmoid(g_new);
    let new_expert_output = tape.mul(mixed, g_new)?;

    Ok(MolkvTerms { expert_output, new_expert_output })
}

/// Training-mode block over one sequence: `h + FFN(h) + both expert terms`.
pub fn train_forward(
    tape: &mut Tape,
    h: Var,
    ids: &[usize],
    embeddings: Var,
    ffn: &FfnParams<Var>,
    block: &MolkvBlockParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let f = swishglu_ffn_on_tape(tape, h, ffn)?;
    let terms = train_expert_terms(tape, h, ids, embeddings, block, cfg)?;
    let y = tape.add(h, f)?;
    let y = tape.add(y, terms.expert_output)?;
    tape.add(y, terms.new_expert_output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelKind;
    use crate::mole::{self, MoleBlockParams, MoleValueTable};
    use crate::numerics::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: usize, window: usize, top_k: usize) -> ModelConfig {
        ModelConfig {
            n_experts: n,
            window,
            top_k,
            d_model: 8,
            d_ff: 12,
            key_dim: 6,
            vocab_size: 13,
            ..ModelConfig::tiny(ModelKind::Molkv)
        }
    }

    fn rvec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn random_block(rng: &mut impl Rng, c: &ModelConfig) -> MolkvBlockParams<Tensor> {
        let mut b = MolkvBlockParams::init(rng, c, 0.5);
        for gain in [&mut b.vocab_norm, &mut b.key_norm, &mut b.value_norm] {
            for v in gain.data_mut() {
                *v = 0.5 + rng.random::<f64>();
            }
        }
        b
    }

    struct Batched {
        y: Tensor,
        own: Tensor,
        new: Tensor,
    }

    fn batched(h: &Tensor, ids: &[usize], emb: &Tensor, ffn: &FfnParams<Tensor>, b: &MolkvBlockParams<Tensor>, c: &ModelConfig) -> Batched {
        let mut tape = Tape::new();
        let hv = tape.leaf(h.clone());
        let ev = tape.leaf(emb.clone());
        let fv = ffn.map_ref(&mut |t| tape.leaf(t.clone()));
        let bv = b.map_ref(&mut |t| tape.leaf(t.clone()));
        let terms = train_expert_terms(&mut tape, hv, ids, ev, &bv, c).unwrap();
        let y = train_forward(&mut tape, hv, ids, ev, &fv, &bv, c).unwrap();
        Batched {
            y: tape.value(y).clone(),
            own: tape.value(terms.expert_output).clone(),
            new: tape.value(terms.new_expert_output).clone(),
        }
    }

    fn incremental(h: &Tensor, ids: &[usize], emb: &Tensor, ffn: &FfnParams<Tensor>, b: &MolkvBlockParams<Tensor>, c: &ModelConfig) -> Vec<MolkvStep> {
        let ip = b.infer_params();
        let mut cache = KvExpertCache::for_config(c);
        ids.iter()
            .enumerate()
            .map(|(t, &id)| {
                let kv = compute_expert_kv(emb.row_slice(id), b, c.norm_eps);
                infer_forward(h.row_slice(t), t, &mut cache, &kv, ffn, &ip, c).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_embedding_gives_zero_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(2, 4, 2);
        let b = random_block(&mut rng, &c);
        for kv in compute_expert_kv(&[0.0; 8], &b, c.norm_eps) {
            assert!(kv.key.iter().chain(&kv.value_raw).chain(&kv.value_normed).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn reference_keys_have_width_146() {
        let c = ModelConfig { d_ff: 4, vocab_size: 2, ..ModelConfig::reference_molkv() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = MolkvBlockParams::init(&mut rng, &c, 0.02);
        let kv = compute_expert_kv(&rvec(&mut rng, 1024), &b, c.norm_eps);
        assert_eq!(kv.len(), 2);
        assert!(kv.iter().all(|e| e.key.len() == 146 && e.value_raw.len() == 1024));
        let again = compute_expert_kv(&vec![0.1; 1024], &b, c.norm_eps);
        assert_eq!(again, compute_expert_kv(&vec![0.1; 1024], &b, c.norm_eps));
    }

    #[test]
    fn query_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(2, 4, 2);
        let ip = random_block(&mut rng, &c).infer_params();
        let h = rvec(&mut rng, 8);
        let (q, q0) = query(&h, &ip, 0, 10000.0).unwrap();
        assert_eq!(q, q0);
        let (_, q9) = query(&h, &ip, 9, 10000.0).unwrap();
        assert!((dot(&q9, &q9) - dot(&q, &q)).abs() < 1e-12);
        let h3: Vec<f64> = h.iter().map(|v| v * 3.0).collect();
        let (q3, _) = query(&h3, &ip, 0, 10000.0).unwrap();
        for (a, b) in q3.iter().zip(&q) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn new_scores_match_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(2, 3, 2);
        let b = random_block(&mut rng, &c);
        let mut ip = b.infer_params();
        let mut cache = KvExpertCache::for_config(&c);
        let h = rvec(&mut rng, 8);
        let (_, q_rot) = query(&h, &ip, 0, c.rope_theta).unwrap();
        assert!(new_scores(&q_rot, &h, &cache, &ip).is_empty());

        let mut stored = Vec::new();
        for p in 0..5 {
            let kv = compute_expert_kv(&rvec(&mut rng, 8), &b, c.norm_eps);
            cache.insert(p, &kv).unwrap();
            stored.push(kv);
        }
        let (_, q_rot) = query(&h, &ip, 5, c.rope_theta).unwrap();
        let got = new_scores(&q_rot, &h, &cache, &ip);
        let route = matvec(&ip.new_router, &h);
        let mut naive = Vec::new();
        for (slot, p) in (2..5).enumerate() {
            for n in 0..2 {
                let k = crate::layers::rope(&stored[p][n].key, p, c.rope_theta).unwrap();
                assert_eq!(cache.key(slot, n), k.as_slice());
                naive.push(dot(&k, &q_rot) / 6f64.sqrt() + route[n]);
            }
        }
        assert_eq!(got.len(), naive.len());
        for (a, b) in got.iter().zip(&naive) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }

        ip.new_router = Tensor::zeros(ip.new_router.shape());
        let qk_only = new_scores(&q_rot, &h, &cache, &ip);
        for (i, v) in qk_only.iter().enumerate() {
            assert!((v - (naive[i] - route[i % 2])).abs() <= 1e-12);
        }
    }

    #[test]
    fn select_examples() {
        let sel = select(&[0.3, -1.2], 32);
        assert_eq!(sel.indices.len(), 2);
        assert!((sel.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let mut s = vec![0.0; 40];
        s[17] = 50.0;
        let sel = select(&s, 32);
        assert_eq!(sel.indices[0], 17);
        assert!(sel.weights[0] > 1.0 - 1e-9);
        assert!(sel.weights.iter().all(|&w| w >= 0.0));
        assert_eq!(select(&[], 4), Selection::default());
    }

    #[test]
    fn augmented_routing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg(3, 4, 2);
        let b = random_block(&mut rng, &c);
        let mut ip = b.infer_params();
        let h = rvec(&mut rng, 8);
        let kv = compute_expert_kv(&rvec(&mut rng, 8), &b, c.norm_eps);
        let s = augmented_routing(&h, &[0.0; 6], &kv, &ip);
        assert_eq!(s, mole::routing(&h, &ip.router));
        let s = augmented_routing(&h, &rvec(&mut rng, 6), &kv, &ip);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        ip.router = Tensor::zeros(ip.router.shape());
        let s = augmented_routing(&h, &[0.0; 6], &kv, &ip);
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn cache_window_and_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cfg(2, 1, 2);
        let b = random_block(&mut rng, &c);
        let mut cache = KvExpertCache::new(1, c.rope_theta);
        for p in 0..6 {
            let kv = compute_expert_kv(&rvec(&mut rng, 8), &b, c.norm_eps);
            cache.insert(p, &kv).unwrap();
            assert_eq!(cache.positions().collect::<Vec<_>>(), vec![p]);
            assert_eq!(cache.key(0, 1), crate::layers::rope(&kv[1].key, p, c.rope_theta).unwrap().as_slice());
        }
        let kv = compute_expert_kv(&rvec(&mut rng, 8), &b, c.norm_eps);
        assert!(matches!(cache.insert(9, &kv), Err(Error::State(_))));

        let m = 4;
        let mut cache = KvExpertCache::new(m, c.rope_theta);
        for p in 0..m + 3 {
            cache.insert(p, &kv).unwrap();
        }
        let current = m + 3;
        assert_eq!(cache.len(), m);
        assert_eq!(cache.positions().next(), Some(current - m));
        assert_eq!(cache.positions().collect::<Vec<_>>(), (current - m..current).collect::<Vec<_>>());
    }

    #[test]
    fn first_position_has_no_new_expert_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cfg(2, 4, 8);
        let b = random_block(&mut rng, &c);
        let ffn = FfnParams::init(&mut rng, 8, 12, 8, 0.5);
        let ip = b.infer_params();
        let mut cache = KvExpertCache::for_config(&c);
        let h = rvec(&mut rng, 8);
        let kv = compute_expert_kv(&rvec(&mut rng, 8), &b, c.norm_eps);
        let step = infer_forward(&h, 0, &mut cache, &kv, &ffn, &ip, &c).unwrap();
        assert!(step.new_expert_output.iter().all(|&v| v == 0.0));
        assert_eq!(step.cache_len, 0);
        assert!(step.selection.indices.is_empty());
        // Reduces to the gated MoLE form with augmented routing.
        let (q, _) = query(&h, &ip, 0, c.rope_theta).unwrap();
        let s = augmented_routing(&h, &q, &kv, &ip);
        let g = kernels::sigmoid(dot(&h, ip.gate.data()));
        let f = swishglu_ffn(&h, &ffn);
        for j in 0..8 {
            let own: f64 = (0..2).map(|n| g * s[n] * kv[n].value_raw[j]).sum();
            assert!((step.y[j] - (h[j] + f[j] + own)).abs() < 1e-14);
        }
        let err = infer_forward(&h, 5, &mut cache, &kv, &ffn, &ip, &c);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn closed_new_gate_removes_new_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cfg(2, 4, 8);
        let b = random_block(&mut rng, &c);
        let mut ip = b.infer_params();
        let mut h = rvec(&mut rng, 8);
        h[0] = 1.0;
        let mut u = vec![0.0; 8];
        u[0] = -800.0;
        ip.new_gate = Tensor::row(u);
        let mut cache = KvExpertCache::for_config(&c);
        for p in 0..4 {
            let kv = compute_expert_kv(&rvec(&mut rng, 8), &b, c.norm_eps);
            let (_, new, m, _) = infer_expert_terms(&h, p, &mut cache, &kv, &ip, 8, c.rope_theta).unwrap();
            assert_eq!(m, p);
            assert!(new.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn short_window_selects_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cfg(2, 16, 8);
        let b = random_block(&mut rng, &c);
        let ip = b.infer_params();
        let mut cache = KvExpertCache::for_config(&c);
        for p in 0..10 {
            let kv = compute_expert_kv(&rvec(&mut rng, 8), &b, c.norm_eps);
            let h = rvec(&mut rng, 8);
            let (_, _, m, sel) = infer_expert_terms(&h, p, &mut cache, &kv, &ip, 8, c.rope_theta).unwrap();
            assert_eq!(sel.indices.len(), (m * 2).min(8));
            if m > 0 {
                assert!((sel.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(sel.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
        }
    }

    #[test]
    fn incremental_matches_batched() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (n, window, k) in [(1, 1, 2), (2, 4, 2), (2, 4, 8), (1, 16, 8), (2, 16, 2)] {
            let c = cfg(n, window, k);
            let b = random_block(&mut rng, &c);
            let ffn = FfnParams::init(&mut rng, 8, 12, 8, 0.5);
            let emb = Tensor::from_fn(&[13, 8], |_| rng.random::<f64>() * 2.0 - 1.0);
            let s = 23;
            let ids: Vec<usize> = (0..s).map(|_| rng.random_range(0..13)).collect();
            let h = Tensor::from_fn(&[s, 8], |_| rng.random::<f64>() * 2.0 - 1.0);
            let full = batched(&h, &ids, &emb, &ffn, &b, &c);
            let steps = incremental(&h, &ids, &emb, &ffn, &b, &c);
            for (t, step) in steps.iter().enumerate() {
                assert!(relative_error(&step.y, full.y.row_slice(t)) <= 1e-12, "({n},{window},{k}) t={t}");
                assert!(relative_error(&step.expert_output, full.own.row_slice(t)) <= 1e-12);
                let new_ref = full.new.row_slice(t);
                if t == 0 {
                    assert!(new_ref.iter().all(|&v| v == 0.0));
                } else {
                    assert!(relative_error(&step.new_expert_output, new_ref) <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn window_mask_equals_causal_mask_when_window_covers_sequence() {
        let (s, n) = (6, 2);
        let mask = window_mask(s, n, s);
        for t in 0..s {
            for j in 0..s {
                for i in 0..n {
                    assert_eq!(mask[t * s * n + j * n + i], j < t);
                }
            }
        }
    }

    #[test]
    fn sequence_of_one_has_no_new_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cfg(2, 4, 2);
        let b = random_block(&mut rng, &c);
        let ffn = FfnParams::init(&mut rng, 8, 12, 8, 0.5);
        let emb = Tensor::from_fn(&[13, 8], |_| rng.random::<f64>());
        let h = Tensor::from_fn(&[1, 8], |_| rng.random::<f64>());
        let full = batched(&h, &[3], &emb, &ffn, &b, &c);
        assert!(full.new.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causality_and_window_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = cfg(2, 3, 4);
        let b = random_block(&mut rng, &c);
        let ffn = FfnParams::init(&mut rng, 8, 12, 8, 0.5);
        let emb = Tensor::from_fn(&[13, 8], |_| rng.random::<f64>() * 2.0 - 1.0);
        let s = 12;
        let ids: Vec<usize> = (0..s).map(|_| rng.random_range(0..13)).collect();
        let h = Tensor::from_fn(&[s, 8], |_| rng.random::<f64>() * 2.0 - 1.0);
        let base = batched(&h, &ids, &emb, &ffn, &b, &c);

        // Later tokens never change earlier outputs.
        let mut later = ids.clone();
        later[8] = (later[8] + 1) % 13;
        let out = batched(&h, &later, &emb, &ffn, &b, &c);
        for t in 0..8 {
            assert_eq!(out.y.row_slice(t), base.y.row_slice(t));
        }
        // Tokens older than the window never change the output (h held fixed,
        // which is the block with backbone attention removed).
        let t = 10;
        let mut older = ids.clone();
        for v in older.iter_mut().take(t - c.window) {
            *v = (*v + 5) % 13;
        }
        let out = batched(&h, &older, &emb, &ffn, &b, &c);
        for r in t..s {
            assert_eq!(out.y.row_slice(r), base.y.row_slice(r));
        }
    }

    #[test]
    fn reduces_to_gated_mole_when_new_path_and_query_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = cfg(2, 4, 4);
        let mut b = random_block(&mut rng, &c);
        b.query = Tensor::zeros(b.query.shape());
        let ffn = FfnParams::init(&mut rng, 8, 12, 8, 0.5);
        let mut ip = b.infer_params();
        let mut u = vec![0.0; 8];
        u[0] = -1e4;
        ip.new_gate = Tensor::row(u);

        let emb = Tensor::from_fn(&[13, 8], |_| rng.random::<f64>() * 2.0 - 1.0);
        let vocab_values: Vec<f64> = (0..13)
            .flat_map(|i| {
                compute_expert_kv(emb.row_slice(i), &b, c.norm_eps)
                    .into_iter()
                    .flat_map(|kv| kv.value_raw)
                    .collect::<Vec<_>>()
            })
            .collect();
        let table = MoleValueTable::new(13, 2, 8, vocab_values).unwrap();
        let gated = MoleBlockParams {
            router: ip.router.clone(),
            gate: Some(ip.gate.clone()),
            experts: Vec::new(),
            values: None,
        };
        let mut cache = KvExpertCache::for_config(&c);
        for p in 0..6 {
            let mut h = rvec(&mut rng, 8);
            h[0] = 1.0;
            let id = rng.random_range(0..13);
            let kv = compute_expert_kv(emb.row_slice(id), &b, c.norm_eps);
            let step = infer_forward(&h, p, &mut cache, &kv, &ffn, &ip, &c).unwrap();
            let reference = mole::infer_forward(&h, id, &table, &ffn, &gated).unwrap();
            assert_eq!(step.y, reference, "position {p}");
        }
    }
}
