//! Backbone building blocks: RMSNorm, rotary embedding, SwishGLU FFN and
//! causal multi-head attention.
//!
//! Each block has a single-token form over slices, used by the decoder, and a
//! batched form recorded on a [`Tape`] for training. Weights follow the
//! `[out, in]` layout, no biases anywhere.

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, dot, matvec};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{join, trunc_normal, Params};
use rand::Rng;

/// SwishGLU feed-forward weights: `down(silu(gate·x) ⊙ up·x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    /// `[D, d_in]`
    pub gate: T,
    /// `[D, d_in]`
    pub up: T,
    /// `[d_out, D]`
    pub down: T,
}

impl FfnParams<Tensor> {
    pub fn init(rng: &mut impl Rng, d_in: usize, hidden: usize, d_out: usize, std: f64) -> Self {
        Self {
            gate: trunc_normal(rng, &[hidden, d_in], std),
            up: trunc_normal(rng, &[hidden, d_in], std),
            down: trunc_normal(rng, &[d_out, hidden], std),
        }
    }

    pub fn d_out(&self) -> usize {
        self.down.shape()[0]
    }
}

impl<T: 'static> Params<T> for FfnParams<T> {
    type With<U> = FfnParams<U>;

    fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> FfnParams<U> {
        FfnParams { gate: f(&self.gate), up: f(&self.up), down: f(&self.down) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(join(prefix, "gate"), &self.gate);
        f(join(prefix, "up"), &self.up);
        f(join(prefix, "down"), &self.down);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(join(prefix, "gate"), &mut self.gate);
        f(join(prefix, "up"), &mut self.up);
        f(join(prefix, "down"), &mut self.down);
    }
}

/// Attention projections, each `[d, d]`. The head count comes from the model config.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

impl AttnParams<Tensor> {
    pub fn init(rng: &mut impl Rng, d: usize, std: f64) -> Self {
        Self {
            wq: trunc_normal(rng, &[d, d], std),
            wk: trunc_normal(rng, &[d, d], std),
            wv: trunc_normal(rng, &[d, d], std),
            wo: trunc_normal(rng, &[d, d], std),
        }
    }
}

impl<T: 'static> Params<T> for AttnParams<T> {
    type With<U> = AttnParams<U>;

    fn map_ref<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttnParams<U> {
        AttnParams { wq: f(&self.wq), wk: f(&self.wk), wv: f(&self.wv), wo: f(&self.wo) }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(join(prefix, "wq"), &self.wq);
        f(join(prefix, "wk"), &self.wk);
        f(join(prefix, "wv"), &self.wv);
        f(join(prefix, "wo"), &self.wo);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(join(prefix, "wq"), &mut self.wq);
        f(join(prefix, "wk"), &mut self.wk);
        f(join(prefix, "wv"), &mut self.wv);
        f(join(prefix, "wo"), &mut self.wo);
    }
}

/// `gain ⊙ x / sqrt(mean(x²) + eps)`.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    kernels::rmsnorm_slice(x, gain, eps)
}

/// Rotary embedding of a single-head vector at an absolute position.
pub fn rope(x: &[f64], position: usize, theta: f64) -> Result<Vec<f64>> {
    rope_heads(x, position, x.len(), theta)
}

/// Rotary embedding applied independently to each `head_dim` block of `x`.
pub fn rope_heads(x: &[f64], position: usize, head_dim: usize, theta: f64) -> Result<Vec<f64>> {
    kernels::check_rope_dims(x.len(), head_dim)?;
    let mut out = x.to_vec();
    kernels::rope_in_place(&mut out, position, head_dim, theta, false);
    Ok(out)
}

pub fn swishglu_ffn(x: &[f64], p: &FfnParams<Tensor>) -> Vec<f64> {
    let g = matvec(&p.gate, x);
    let u = matvec(&p.up, x);
    let hidden: Vec<f64> = g.iter().zip(&u).map(|(&a, &b)| kernels::silu(a) * b).collect();
    matvec(&p.down, &hidden)
}

pub fn swishglu_ffn_on_tape(tape: &mut Tape, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let g = tape.matmul_nt(x, p.gate)?;
    let u = tape.matmul_nt(x, p.up)?;
    let a = tape.silu(g);
    let hidden = tape.mul(a, u)?;
    tape.matmul_nt(hidden, p.down)
}

/// Rotated keys and values of every position seen so far, for one layer.
#[derive(Clone, Debug, Default)]
pub struct AttnCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl AttnCache {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// One step of causal attention for the token at `cache.len()`.
pub fn causal_attention_step(
    x: &[f64],
    p: &AttnParams<Tensor>,
    cache: &mut AttnCache,
    n_heads: usize,
    theta: f64,
) -> Result<Vec<f64>> {
    let d = x.len();
    if d % n_heads != 0 {
        return Err(Error::Dimension(format!("{n_heads} heads do not divide width {d}")));
    }
    let hd = d / n_heads;
    let position = cache.len();
    let q = rope_heads(&matvec(&p.wq, x), position, hd, theta)?;
    let k = rope_heads(&matvec(&p.wk, x), position, hd, theta)?;
    cache.keys.push(k);
    cache.values.push(matvec(&p.wv, x));

    let scale = 1.0 / (hd as f64).sqrt();
    let mut mixed = vec![0.0; d];
    let mut scores = vec![0.0; cache.len()];
    for h in 0..n_heads {
        let r = h * hd..(h + 1) * hd;
        for (s, key) in scores.iter_mut().zip(&cache.keys) {
            *s = dot(&q[r.clone()], &key[r.clone()]) * scale;
        }
        let w = kernels::softmax_slice(&scores);
        for (wt, v) in w.iter().zip(&cache.values) {
            for (o, &vv) in mixed[r.clone()].iter_mut().zip(&v[r.clone()]) {
                *o += wt * vv;
            }
        }
    }
    Ok(matvec(&p.wo, &mixed))
}

/// Causal multi-head attention over a `[s, d]` sequence starting at position 0.
pub fn causal_attention_on_tape(
    tape: &mut Tape,
    x: Var,
    p: &AttnParams<Var>,
    n_heads: usize,
    theta: f64,
) -> Result<Var> {
    let (s, d) = tape.value(x).dims2()?;
    if d % n_heads != 0 {
        return Err(Error::Dimension(format!("{n_heads} heads do not divide width {d}")));
    }
    let hd = d / n_heads;
    let positions: Vec<usize> = (0..s).collect();
    let q = tape.matmul_nt(x, p.wq)?;
    let q = tape.rope(q, &positions, hd, theta)?;
    let k = tape.matmul_nt(x, p.wk)?;
    let k = tape.rope(k, &positions, hd, theta)?;
    let v = tape.matmul_nt(x, p.wv)?;
    let mask: Vec<bool> = (0..s * s).map(|i| i % s <= i / s).collect();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let w = tape.masked_softmax(scores, mask.clone())?;
        heads.push(tape.matmul(w, vh)?);
    }
    let mixed = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    tape.matmul_nt(mixed, p.wo)
}
