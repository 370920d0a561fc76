use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Dense,
    Mole,
    GatedMole,
    Molkv,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Dense,
        ModelKind::Mole,
        ModelKind::GatedMole,
        ModelKind::Molkv,
    ];

    pub fn has_experts(self) -> bool {
        self != ModelKind::Dense
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dense => "dense",
            ModelKind::Mole => "mole",
            ModelKind::GatedMole => "gated-mole",
            ModelKind::Molkv => "molkv",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("kind", format!("unknown model kind `{s}`")))
    }
}

/// Architecture scalars of a Dense, MoLE, Gated MoLE or MoLKV model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_layers: usize,
    pub d_model: usize,
    /// FFN intermediate size.
    pub d_ff: usize,
    /// Experts per token id in each expert layer.
    #[serde(default)]
    pub n_experts: usize,
    pub vocab_size: usize,
    /// Expert key size; 0 for everything but MoLKV.
    #[serde(default)]
    pub key_dim: usize,
    /// Cached expert window M.
    #[serde(default)]
    pub window: usize,
    /// Cached expert values selected per token.
    #[serde(default)]
    pub top_k: usize,
    /// Layer indices carrying experts.
    #[serde(default)]
    pub expert_layers: Vec<usize>,
    #[serde(default)]
    pub n_heads: Option<usize>,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// MoLE only: train free per-id values instead of FFN experts over embeddings.
    #[serde(default)]
    pub free_values: bool,
}

fn default_rope_theta() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    1e-8
}

impl ModelConfig {
    const REFERENCE_VOCAB: usize = 50304;

    pub fn reference_dense() -> Self {
        Self {
            kind: ModelKind::Dense,
            n_layers: 16,
            d_model: 1024,
            d_ff: 2644,
            n_experts: 0,
            vocab_size: Self::REFERENCE_VOCAB,
            key_dim: 0,
            window: 0,
            top_k: 0,
            expert_layers: Vec::new(),
            n_heads: Some(16),
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            free_values: false,
        }
    }

    pub fn reference_mole() -> Self {
        Self {
            kind: ModelKind::Mole,
            n_experts: 2,
            expert_layers: (0..16).collect(),
            ..Self::reference_dense()
        }
    }

    pub fn reference_gated_mole() -> Self {
        Self {
            kind: ModelKind::GatedMole,
            ..Self::reference_mole()
        }
    }

    pub fn reference_molkv() -> Self {
        Self {
            kind: ModelKind::Molkv,
            d_ff: 2548,
            n_experts: 2,
            key_dim: 146,
            window: 512,
            top_k: 32,
            expert_layers: (0..14).collect(),
            ..Self::reference_dense()
        }
    }

    /// A small configuration of `kind` suited to CPU training and tests.
    pub fn tiny(kind: ModelKind) -> Self {
        let experts = kind.has_experts();
        let molkv = kind == ModelKind::Molkv;
        Self {
            kind,
            n_layers: 2,
            d_model: 32,
            d_ff: 64,
            n_experts: if experts { 2 } else { 0 },
            vocab_size: 256,
            key_dim: if molkv { 8 } else { 0 },
            window: if molkv { 16 } else { 0 },
            top_k: if molkv { 8 } else { 0 },
            expert_layers: if experts { vec![0, 1] } else { Vec::new() },
            n_heads: Some(2),
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            free_values: false,
        }
    }

    pub fn heads(&self) -> usize {
        self.n_heads.unwrap_or((self.d_model / 64).max(1))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads()
    }

    pub fn is_expert_layer(&self, layer: usize) -> bool {
        self.kind.has_experts() && self.expert_layers.contains(&layer)
    }

    /// Position of `layer` among the expert layers, which is its index in an expert store.
    pub fn expert_slot(&self, layer: usize) -> Option<usize> {
        if !self.kind.has_experts() {
            return None;
        }
        self.expert_layers.iter().position(|&l| l == layer)
    }

    pub fn n_expert_layers(&self) -> usize {
        if self.kind.has_experts() {
            self.expert_layers.len()
        } else {
            0
        }
    }

    /// Parameters per stored expert: `d + d′`.
    pub fn expert_width(&self) -> usize {
        self.d_model + self.key_dim
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        nonzero("n_layers", self.n_layers)?;
        nonzero("d_model", self.d_model)?;
        nonzero("d_ff", self.d_ff)?;
        nonzero("vocab_size", self.vocab_size)?;
        let heads = self.heads();
        nonzero("n_heads", heads)?;
        if self.d_model % heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("{heads} heads do not divide d_model {}", self.d_model),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(
                "n_heads",
                format!("head dimension {} must be even for rotary embedding", self.head_dim()),
            ));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::config("rope_theta", "must be positive"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps", "must be positive"));
        }
        let mut seen = vec![false; self.n_layers];
        for &l in &self.expert_layers {
            if l >= self.n_layers {
                return Err(Error::config(
                    "expert_layers",
                    format!("layer {l} out of range for {} layers", self.n_layers),
                ));
            }
            if std::mem::replace(&mut seen[l], true) {
                return Err(Error::config("expert_layers", format!("layer {l} listed twice")));
            }
        }
        if self.free_values && !matches!(self.kind, ModelKind::Mole | ModelKind::GatedMole) {
            return Err(Error::config("free_values", "only MoLE models have free values"));
        }

        match self.kind {
            ModelKind::Dense => {
                if self.n_experts != 0 {
                    return Err(Error::config("n_experts", "dense models have no experts"));
                }
                if !self.expert_layers.is_empty() {
                    return Err(Error::config("expert_layers", "dense models have no expert layers"));
                }
                if self.key_dim != 0 {
                    return Err(Error::config("key_dim", "dense models have no expert keys"));
                }
            }
            ModelKind::Mole | ModelKind::GatedMole => {
                nonzero("n_experts", self.n_experts)?;
                if self.expert_layers.is_empty() {
                    return Err(Error::config("expert_layers", "must name at least one layer"));
                }
                if self.key_dim != 0 {
                    return Err(Error::config("key_dim", "MoLE models require key_dim = 0"));
                }
            }
            ModelKind::Molkv => {
                nonzero("n_experts", self.n_experts)?;
                nonzero("key_dim", self.key_dim)?;
                nonzero("window", self.window)?;
                nonzero("top_k", self.top_k)?;
                if self.key_dim % 2 != 0 {
                    return Err(Error::config("key_dim", "must be even for rotary embedding"));
                }
                if self.expert_layers.is_empty() {
                    return Err(Error::config("expert_layers", "must name at least one layer"));
                }
            }
        }
        Ok(())
    }
}
