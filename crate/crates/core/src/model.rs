//! Full pre-norm decoder: embedding, `L` layers of attention + FFN (with
//! expert terms in configured layers), final norm and an untied output head.

use crate::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::layers::{causal_attention_on_tape, swishglu_ffn_on_tape, AttnParams, FfnParams};
use crate::mole::{self, MoleBlockParams};
use crate::molkv::{self, MolkvBlockParams, MolkvInferParams};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{join, trunc_normal, Params};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum ExpertBlock<T> {
    Mole(MoleBlockParams<T>),
    Molkv(MolkvBlockParams<T>),
}

impl<T: 'static> Params<T> for ExpertBlock<T> {
    type With<U> = ExpertBlock<U>;

    fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> ExpertBlock<U> {
        match self {
            ExpertBlock::Mole(b) => ExpertBlock::Mole(b.map_ref(f)),
            ExpertBlock::Molkv(b) => ExpertBlock::Molkv(b.map_ref(f)),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        match self {
            ExpertBlock::Mole(b) => b.visit(prefix, f),
            ExpertBlock::Molkv(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        match self {
            ExpertBlock::Mole(b) => b.visit_mut(prefix, f),
            ExpertBlock::Molkv(b) => b.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: T,
    pub attn: AttnParams<T>,
    pub ffn_norm: T,
    pub ffn: FfnParams<T>,
    pub experts: Option<ExpertBlock<T>>,
}

impl<T: 'static> Params<T> for LayerParams<T> {
    type With<U> = LayerParams<U>;

    fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            attn_norm: f(&self.attn_norm),
            attn: self.attn.map_ref(f),
            ffn_norm: f(&self.ffn_norm),
            ffn: self.ffn.map_ref(f),
            experts: self.experts.as_ref().map(|e| e.map_ref(f)),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(join(prefix, "attn_norm"), &self.attn_norm);
        self.attn.visit(&join(prefix, "attn"), f);
        f(join(prefix, "ffn_norm"), &self.ffn_norm);
        self.ffn.visit(&join(prefix, "ffn"), f);
        if let Some(e) = &self.experts {
            e.visit(&join(prefix, "experts"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(join(prefix, "attn_norm"), &mut self.attn_norm);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        f(join(prefix, "ffn_norm"), &mut self.ffn_norm);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        if let Some(e) = &mut self.experts {
            e.visit_mut(&join(prefix, "experts"), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// Token embeddings `e_i`, `[|V|, d]`; also the expert inputs.
    pub embed: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: T,
    /// Output projection `[|V|, d]`, not tied to `embed`.
    pub lm_head: T,
}

impl<T: 'static> Params<T> for ModelParams<T> {
    type With<U> = ModelParams<U>;

    fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            embed: f(&self.embed),
            layers: self.layers.map_ref(f),
            final_norm: f(&self.final_norm),
            lm_head: f(&self.lm_head),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(join(prefix, "embed"), &self.embed);
        self.layers.visit(&join(prefix, "layers"), f);
        f(join(prefix, "final_norm"), &self.final_norm);
        f(join(prefix, "lm_head"), &self.lm_head);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(join(prefix, "embed"), &mut self.embed);
        self.layers.visit_mut(&join(prefix, "layers"), f);
        f(join(prefix, "final_norm"), &mut self.final_norm);
        f(join(prefix, "lm_head"), &mut self.lm_head);
    }
}

/// A model in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    /// Truncated-normal weights with standard deviation `init_std`; norm gains start at 1.
    pub fn init(config: ModelConfig, seed: u64, init_std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let embed = trunc_normal(&mut rng, &[v, d], init_std);
        let layers = (0..config.n_layers)
            .map(|l| {
                let attn = AttnParams::init(&mut rng, d, init_std);
                let ffn = FfnParams::init(&mut rng, d, config.d_ff, d, init_std);
                let experts = config.is_expert_layer(l).then(|| match config.kind {
                    ModelKind::Molkv => {
                        ExpertBlock::Molkv(MolkvBlockParams::init(&mut rng, &config, init_std))
                    }
                    kind => ExpertBlock::Mole(MoleBlockParams::init(
                        &mut rng,
                        &config,
                        kind == ModelKind::GatedMole,
                        init_std,
                    )),
                });
                LayerParams {
                    attn_norm: Tensor::full(&[d], 1.0),
                    attn,
                    ffn_norm: Tensor::full(&[d], 1.0),
                    ffn,
                    experts,
                }
            })
            .collect();
        let lm_head = trunc_normal(&mut rng, &[v, d], init_std);
        Ok(Self {
            config,
            params: ModelParams { embed, layers, final_norm: Tensor::full(&[d], 1.0), lm_head },
        })
    }

    /// Records every parameter as a tape leaf.
    pub fn leaves_on(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.params.map_ref(&mut |t| tape.leaf(t.clone()))
    }

    pub fn num_params(&self) -> usize {
        self.params.leaves().iter().map(|t| t.len()).sum()
    }

    /// Training-mode logits `[s, |V|]` for one token sequence.
    pub fn forward_on_tape(&self, tape: &mut Tape, p: &ModelParams<Var>, tokens: &[usize]) -> Result<Var> {
        forward_on_tape(&self.config, tape, p, tokens)
    }

    /// Training-mode logits evaluated without keeping the tape.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.leaves_on(&mut tape);
        let out = self.forward_on_tape(&mut tape, &p, tokens)?;
        Ok(tape.value(out).clone())
    }
}

pub fn forward_on_tape(
    cfg: &ModelConfig,
    tape: &mut Tape,
    p: &ModelParams<Var>,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    let eps = cfg.norm_eps;
    let mut x = tape.gather_rows(p.embed, tokens)?;
    for layer in &p.layers {
        let xn = tape.rmsnorm(x, layer.attn_norm, eps)?;
        let a = causal_attention_on_tape(tape, xn, &layer.attn, cfg.heads(), cfg.rope_theta)?;
        let resid = tape.add(x, a)?;
        let h = tape.rmsnorm(resid, layer.ffn_norm, eps)?;
        let f = swishglu_ffn_on_tape(tape, h, &layer.ffn)?;
        let mut y = tape.add(resid, f)?;
        match &layer.experts {
            Some(ExpertBlock::Mole(b)) => {
                let e = mole::train_expert_term(tape, h, tokens, p.embed, b)?;
                y = tape.add(y, e)?;
            }
            Some(ExpertBlock::Molkv(b)) => {
                let terms = molkv::train_expert_terms(tape, h, tokens, p.embed, b, cfg)?;
                y = tape.add(y, terms.expert_output)?;
                y = tape.add(y, terms.new_expert_output)?;
            }
            None => {}
        }
        x = y;
    }
    let xn = tape.rmsnorm(x, p.final_norm, eps)?;
    tape.matmul_nt(xn, p.lm_head)
}

/// Expert-layer weights that stay in memory at inference time.
#[derive(Clone, Debug, PartialEq)]
pub enum InferBlock {
    /// MoLE / Gated MoLE: routers and optional gate; expert FFNs are empty.
    Mole(MoleBlockParams<Tensor>),
    Molkv(MolkvInferParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferLayer {
    pub attn_norm: Tensor,
    pub attn: AttnParams<Tensor>,
    pub ffn_norm: Tensor,
    pub ffn: FfnParams<Tensor>,
    pub block: Option<InferBlock>,
}

/// A reparameterized model: everything except the per-id experts, which are
/// fetched from an expert store per token.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<InferLayer>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl InferenceModel {
    pub fn from_model(model: &Model) -> Self {
        let p = &model.params;
        let layers = p
            .layers
            .iter()
            .map(|l| InferLayer {
                attn_norm: l.attn_norm.clone(),
                attn: l.attn.clone(),
                ffn_norm: l.ffn_norm.clone(),
                ffn: l.ffn.clone(),
                block: l.experts.as_ref().map(|e| match e {
                    ExpertBlock::Mole(b) => InferBlock::Mole(MoleBlockParams {
                        router: b.router.clone(),
                        gate: b.gate.clone(),
                        experts: Vec::new(),
                        values: None,
                    }),
                    ExpertBlock::Molkv(b) => InferBlock::Molkv(b.infer_params()),
                }),
            })
            .collect();
        Self {
            config: model.config.clone(),
            embed: p.embed.clone(),
            layers,
            final_norm: p.final_norm.clone(),
            lm_head: p.lm_head.clone(),
        }
    }

    /// Random inference weights without the training-mode expert FFNs; for
    /// exercising the decoder at sizes where a trainable model is impractical.
    pub fn random(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, n, dk) = (config.d_model, config.vocab_size, config.n_experts, config.key_dim);
        let embed = trunc_normal(&mut rng, &[v, d], std);
        let layers = (0..config.n_layers)
            .map(|l| {
                let attn = AttnParams::init(&mut rng, d, std);
                let ffn = FfnParams::init(&mut rng, d, config.d_ff, d, std);
                let block = config.is_expert_layer(l).then(|| match config.kind {
                    ModelKind::Molkv => InferBlock::Molkv(MolkvInferParams {
                        query: trunc_normal(&mut rng, &[dk, d], std),
                        router: trunc_normal(&mut rng, &[n, d], std),
                        new_router: trunc_normal(&mut rng, &[n, d], std),
                        gate: trunc_normal(&mut rng, &[1, d], std),
                        new_gate: trunc_normal(&mut rng, &[1, d], std),
                        value_norm: Tensor::full(&[d], 1.0),
                    }),
                    kind => InferBlock::Mole(MoleBlockParams {
                        router: trunc_normal(&mut rng, &[n, d], std),
                        gate: (kind == ModelKind::GatedMole).then(|| trunc_normal(&mut rng, &[1, d], std)),
                        experts: Vec::new(),
                        values: None,
                    }),
                });
                InferLayer {
                    attn_norm: Tensor::full(&[d], 1.0),
                    attn,
                    ffn_norm: Tensor::full(&[d], 1.0),
                    ffn,
                    block,
                }
            })
            .collect();
        let lm_head = trunc_normal(&mut rng, &[v, d], std);
        Ok(Self { config, embed, layers, final_norm: Tensor::full(&[d], 1.0), lm_head })
    }
}
