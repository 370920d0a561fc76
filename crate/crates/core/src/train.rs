//! Byte-level language-model training: tokenizer, corpus, AdamW with warmup
//! and cosine decay, global-norm clipping, checkpoints and validation loss.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{nll, Tape, Tensor};
use crate::params::Params;

pub const BYTE_VOCAB: usize = 256;

/// Identity tokenizer over raw bytes.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB
    }

    pub fn tokenize(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<u8>> {
        ids.iter()
            .map(|&i| {
                u8::try_from(i).map_err(|_| Error::Lookup(format!("id {i} out of range for vocabulary {BYTE_VOCAB}")))
            })
            .collect()
    }
}

/// Token stream with a tail reserved for validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    tokens: Vec<usize>,
    split: usize,
}

impl Corpus {
    /// Holds out the last `val_fraction` of `tokens` for validation.
    pub fn new(tokens: Vec<usize>, val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        let split = tokens.len() - (tokens.len() as f64 * val_fraction).round() as usize;
        Ok(Self { tokens, split })
    }

    pub fn from_bytes(bytes: &[u8], val_fraction: f64) -> Result<Self> {
        Self::new(ByteTokenizer.tokenize(bytes), val_fraction)
    }

    pub fn from_file(path: &Path, val_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, val_fraction)
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn validation(&self) -> &[usize] {
        &self.tokens[self.split..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn d_seq_length() -> usize {
    2048
}
fn d_batch_size() -> usize {
    8
}
fn d_grad_accum() -> usize {
    30
}
fn d_steps() -> usize {
    20_000
}
fn d_warmup() -> usize {
    200
}
fn d_lr() -> f64 {
    3e-4
}
fn d_min_lr() -> f64 {
    3e-6
}
fn d_weight_decay() -> f64 {
    0.1
}
fn d_betas() -> [f64; 2] {
    [0.9, 0.95]
}
fn d_grad_clip() -> f64 {
    1.0
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_init_std() -> f64 {
    0.02
}
fn d_val_fraction() -> f64 {
    0.05
}

/// Optimization settings. Omitted keys take the documented defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_seq_length")]
    pub seq_length: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_grad_accum")]
    pub grad_accum: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_min_lr")]
    pub min_lr: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_betas")]
    pub betas: [f64; 2],
    #[serde(default = "d_grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_length: d_seq_length(),
            batch_size: d_batch_size(),
            grad_accum: d_grad_accum(),
            steps: d_steps(),
            warmup_steps: d_warmup(),
            lr: d_lr(),
            min_lr: d_min_lr(),
            weight_decay: d_weight_decay(),
            betas: d_betas(),
            grad_clip: d_grad_clip(),
            adam_eps: d_adam_eps(),
            init_std: d_init_std(),
            seed: 0,
            val_fraction: d_val_fraction(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("seq_length", self.seq_length),
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config("warmup_steps", "must not exceed steps"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and nonnegative"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::config("min_lr", "must lie in [0, lr]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("betas", "each beta must lie in [0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init_std", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay reaching `min_lr` at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    if cfg.steps == cfg.warmup_steps {
        return cfg.lr;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / (cfg.steps - cfg.warmup_steps) as f64).min(1.0);
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(c);
        }
    }
    norm
}

/// AdamW moments, one pair per parameter tensor in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(model: &Model) -> Self {
        let z: Vec<Tensor> = model.params.leaves().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// Summary of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Step count after the update (1-based).
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepStats {
    /// One metrics-log record.
    pub fn log_line(&self) -> String {
        format!(
            "step={} lr={:.6e} loss={:.6} grad_norm={:.6}",
            self.step, self.lr, self.loss, self.grad_norm
        )
    }
}

/// Mean cross-entropy and parameter gradients (model order) for one token window.
pub fn sequence_grads(model: &Model, window: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    if window.len() < 2 {
        return Err(Error::Contract("a training window needs at least two tokens".into()));
    }
    let (inputs, targets) = (&window[..window.len() - 1], &window[1..]);
    let mut tape = Tape::new();
    let vars = model.leaves_on(&mut tape);
    let logits = model.forward_on_tape(&mut tape, &vars, inputs)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let out = vars
        .leaves()
        .into_iter()
        .zip(model.params.leaves())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, out))
}

/// A model, its optimizer state and its schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamState,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(model_config, config.seed, config.init_std)?;
        let opt = AdamState::zeros_like(&model);
        Ok(Self { model, opt, config, step: 0 })
    }

    /// The `batch_size · grad_accum` windows of `seq_length + 1` tokens for `step`.
    pub fn sample_batch(&self, tokens: &[usize], step: usize) -> Result<Vec<Vec<usize>>> {
        let span = self.config.seq_length + 1;
        if tokens.len() < span {
            return Err(Error::Contract(format!(
                "training stream of {} tokens is shorter than one window of {span}",
                tokens.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64);
        let n = self.config.batch_size * self.config.grad_accum;
        Ok((0..n)
            .map(|_| {
                let start = rng.random_range(0..=tokens.len() - span);
                tokens[start..start + span].to_vec()
            })
            .collect())
    }

    /// One optimizer step on freshly sampled training windows.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<StepStats> {
        let batch = self.sample_batch(corpus.train(), self.step)?;
        self.step_on(&batch)
    }

    /// One optimizer step on the given windows.
    pub fn step_on(&mut self, batch: &[Vec<usize>]) -> Result<StepStats> {
        let step = self.step;
        let vocab = self.model.config.vocab_size;
        if let Some(bad) = batch.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Lookup(format!("token {bad} out of range for vocabulary {vocab}")));
        }
        let per_seq: Vec<(f64, Vec<Tensor>)> = batch
            .par_iter()
            .map(|w| sequence_grads(&self.model, w))
            .collect::<Result<_>>()
            .map_err(|e| Error::Training { step, detail: e.to_string() })?;
        let n = per_seq.len() as f64;
        let mut iter = per_seq.into_iter();
        let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Training {
            step,
            detail: "empty batch".into(),
        })?;
        for (l, g) in iter {
            loss += l;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.add_assign(b);
            }
        }
        loss /= n;
        for g in grads.iter_mut() {
            g.scale_assign(1.0 / n);
        }
        if !loss.is_finite() {
            return Err(Error::Training { step, detail: format!("non-finite loss {loss}") });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Training { step, detail: format!("non-finite gradient norm {grad_norm}") });
        }
        let lr = lr_at(step + 1, &self.config);
        self.adamw_update(&grads, lr, step + 1);
        self.step = step + 1;
        Ok(StepStats { step: self.step, lr, loss, grad_norm })
    }

    fn adamw_update(&mut self, grads: &[Tensor], lr: f64, t: usize) {
        let c = &self.config;
        let [b1, b2] = c.betas;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let (wd, eps) = (c.weight_decay, c.adam_eps);
        let opt = &mut self.opt;
        let mut i = 0;
        self.model.params.visit_mut("", &mut |_, p| {
            let decay = if p.rank() >= 2 { 1.0 - lr * wd } else { 1.0 };
            let (m, v, g) = (opt.m[i].data_mut(), opt.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *w = *w * decay - lr * update;
            }
            i += 1;
        });
    }

    /// Steps until `until` completed steps, calling `on_step` after each.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        until: usize,
        mut on_step: impl FnMut(&Self, &StepStats) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let stats = self.train_step(corpus)?;
            on_step(self, &stats)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.checkpoint_bytes()?).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Serialized checkpoint; see [`Trainer::from_checkpoint_bytes`] for the layout.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let echo = serde_json::to_vec(&ConfigEcho { model: self.model.config.clone(), train: self.config.clone() })
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&(echo.len() as u64).to_le_bytes());
        out.extend_from_slice(&echo);
        let named = self.model.params.named_leaves();
        out.extend_from_slice(&(named.len() as u64).to_le_bytes());
        for (i, (name, p)) in named.iter().enumerate() {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.rank() as u64).to_le_bytes());
            for &s in p.shape() {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for t in [*p, &self.opt.m[i], &self.opt.v[i]] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. Layout (little-endian): magic `MLKVCKPT`, u32
    /// version, u64 step, u64 length + JSON `{model, train}` config echo, u64
    /// tensor count, then per tensor: u64 name length, name, u64 rank, u64
    /// dims, and the parameter, first moment and second moment as f64.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()? as usize;
        let echo_len = r.u64()? as usize;
        let echo: ConfigEcho =
            serde_json::from_slice(r.take(echo_len)?).map_err(|e| Error::Format(format!("config echo: {e}")))?;
        echo.train.validate()?;
        let mut model = Model::init(echo.model, echo.train.seed, echo.train.init_std)?;
        let mut opt = AdamState::zeros_like(&model);
        let count = r.u64()? as usize;
        let expected = model.params.leaves().len();
        if count != expected {
            return Err(Error::Format(format!("{count} tensors stored, model has {expected}")));
        }
        let mut failure = None;
        let mut i = 0;
        model.params.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            let res = (|| -> Result<()> {
                let n = r.u64()? as usize;
                let stored = std::str::from_utf8(r.take(n)?).map_err(|e| Error::Format(e.to_string()))?;
                if stored != name {
                    return Err(Error::Format(format!("tensor `{stored}` where `{name}` was expected")));
                }
                let rank = r.u64()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
                if shape != p.shape() {
                    return Err(Error::Format(format!("`{name}` has shape {shape:?}, expected {:?}", p.shape())));
                }
                for t in [p.data_mut(), opt.m[i].data_mut(), opt.v[i].data_mut()] {
                    for v in t.iter_mut() {
                        *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                    }
                }
                Ok(())
            })();
            if let Err(e) = res {
                failure = Some(e);
            }
            i += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { model, opt, config: echo.train, step })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MLKVCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    train: TrainConfig,
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Mean next-token negative log-likelihood in nats over `tokens`, scored in
/// consecutive windows of at most `seq_length` predictions.
pub fn evaluate(model: &Model, tokens: &[usize], seq_length: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Contract("evaluation needs at least two tokens".into()));
    }
    if seq_length == 0 {
        return Err(Error::config("seq_length", "must be at least 1"));
    }
    let starts: Vec<usize> = (0..tokens.len() - 1).step_by(seq_length).collect();
    let sums: Vec<(f64, usize)> = starts
        .par_iter()
        .map(|&s| {
            let end = (s + seq_length + 1).min(tokens.len());
            let w = &tokens[s..end];
            let logits = model.logits(&w[..w.len() - 1])?;
            let total: f64 = w[1..].iter().enumerate().map(|(r, &t)| nll(logits.row_slice(r), t)).sum();
            Ok((total, w.len() - 1))
        })
        .collect::<Result<_>>()?;
    let (total, count) = sums.iter().fold((0.0, 0), |(a, n), (b, m)| (a + b, n + m));
    Ok(total / count as f64)
}

/// Deterministic English-like text of exactly `n_bytes` bytes.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    const DET: &[&str] = &["the", "a", "every", "one", "that", "this", "some"];
    const ADJ: &[&str] = &[
        "small", "quiet", "bright", "old", "green", "heavy", "quick", "gentle", "strange", "warm", "cold", "tall",
    ];
    const NOUN: &[&str] = &[
        "river", "garden", "teacher", "machine", "window", "city", "letter", "forest", "engine", "child", "market",
        "bridge", "story", "mountain", "lamp", "harbor",
    ];
    const VERB: &[&str] = &[
        "watches", "builds", "follows", "finds", "carries", "remembers", "opens", "paints", "crosses", "hears",
        "keeps", "moves",
    ];
    const ADV: &[&str] = &["slowly", "again", "today", "often", "quietly", "early", "together"];
    const PREP: &[&str] = &["near", "under", "beside", "across", "behind", "through"];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_bytes + 128);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
    while out.len() < n_bytes {
        let mut words: Vec<&str> = vec![pick(&mut rng, DET)];
        if rng.random_bool(0.5) {
            words.push(pick(&mut rng, ADJ));
        }
        words.push(pick(&mut rng, NOUN));
        words.push(pick(&mut rng, VERB));
        words.push(pick(&mut rng, DET));
        words.push(pick(&mut rng, NOUN));
        if rng.random_bool(0.4) {
            words.push(pick(&mut rng, PREP));
            words.push("the");
            words.push(pick(&mut rng, NOUN));
        }
        if rng.random_bool(0.3) {
            words.push(pick(&mut rng, ADV));
        }
        let mut sentence = words.join(" ");
        sentence[..1].make_ascii_uppercase();
        sentence.push_str(if rng.random_bool(0.1) { ".\n" } else { ". " });
        out.extend_from_slice(sentence.as_bytes());
    }
    out.truncate(n_bytes);
    out
}
