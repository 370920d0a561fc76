//! The `molkv` command line: train, export, decode, cost and verify, all driven
//! by a JSON run manifest.
//!
//! # Manifest
//!
//! ```json
//! {
//!   "kind": "molkv",
//!   "model": { "n_layers": 2, "d_model": 32, "d_ff": 64, "n_experts": 2, "vocab_size": 256,
//!              "key_dim": 8, "window": 16, "top_k": 8, "expert_layers": [0, 1], "n_heads": 2 },
//!   "train": { "seq_length": 64, "steps": 400 },
//!   "paths": { "corpus": "corpus.txt", "checkpoint": "run.ckpt", "store": "run.mlkv",
//!              "report": "decode.jsonl", "metrics": "train.log" },
//!   "decode": { "prompt": "The ", "steps": 64, "temperature": 0.8 }
//! }
//! ```
//!
//! Omitted `train` keys take the documented defaults. Without `paths.corpus`,
//! training uses the built-in synthetic corpus seeded by `train.seed`.
//!
//! # Decode report
//!
//! One JSON object per line for every (token, layer) pair, with fields
//! `token_index`, `layer`, `macs`, `params_loaded`, `bytes_loaded`, `cache_len`.
//!
//! # Exit codes
//!
//! 0 success, 1 runtime failure, 2 configuration error, 3 verification failure.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use molkv_core::expertstore::{self, count_params, ParamConvention, StoreDType, StoreReader};
use molkv_core::runtime::{closed_form_costs, Decoder, Sampler};
use molkv_core::train::{evaluate, synthetic_corpus, ByteTokenizer, Corpus, TrainConfig, Trainer};
use molkv_core::verify::{self, Status};
use molkv_core::{InferenceModel, ModelConfig, ModelKind};

/// Bytes of synthetic text used when a manifest names no corpus.
pub const SYNTHETIC_CORPUS_BYTES: usize = 2_000_000;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] molkv_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config { key: key.into(), reason: reason.into() }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Core(molkv_core::Error::Config { .. }) => 2,
            CliError::Verification(_) => 3,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub store: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
}

fn default_prompt() -> String {
    "The ".to_string()
}

fn default_decode_steps() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    #[serde(default = "default_prompt")]
    pub prompt: String,
    #[serde(default = "default_decode_steps")]
    pub steps: usize,
    /// Greedy decoding when absent.
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self { prompt: default_prompt(), steps: default_decode_steps(), temperature: None }
    }
}

/// A fully validated run description.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub decode: DecodeSettings,
}

/// Turns a serde message into a config error naming the offending key.
fn serde_config_error(section: &str, e: serde_json::Error) -> CliError {
    let msg = e.to_string();
    let field = msg.split('`').nth(1).filter(|_| msg.contains("field `"));
    let key = match field {
        Some(f) if section.is_empty() => f.to_string(),
        Some(f) => format!("{section}.{f}"),
        None if section.is_empty() => "manifest".to_string(),
        None => section.to_string(),
    };
    CliError::config(key, msg)
}

fn section<T: for<'de> Deserialize<'de> + Default>(map: &mut Map<String, Value>, name: &str) -> CliResult<T> {
    match map.remove(name) {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| serde_config_error(name, e)),
    }
}

impl RunManifest {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| serde_config_error("", e))?;
        let Value::Object(mut top) = value else {
            return Err(CliError::config("manifest", "expected a JSON object"));
        };
        let kind: ModelKind = match top.remove("kind") {
            Some(v) => serde_json::from_value(v).map_err(|e| serde_config_error("kind", e))?,
            None => return Err(CliError::config("kind", "missing required key")),
        };
        let mut model = match top.remove("model") {
            Some(Value::Object(m)) => m,
            Some(_) => return Err(CliError::config("model", "expected an object")),
            None => return Err(CliError::config("model", "missing required key")),
        };
        if model.contains_key("kind") {
            return Err(CliError::config("model.kind", "set the model kind at the top level"));
        }
        model.insert("kind".into(), serde_json::to_value(kind).expect("kind serializes"));
        let model: ModelConfig =
            serde_json::from_value(Value::Object(model)).map_err(|e| serde_config_error("model", e))?;
        let train: TrainConfig = section(&mut top, "train")?;
        let paths: Paths = section(&mut top, "paths")?;
        let decode: DecodeSettings = section(&mut top, "decode")?;
        if let Some(k) = top.keys().next() {
            return Err(CliError::config(k.clone(), "unknown key"));
        }
        let m = Self { kind, model, train, paths, decode };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        let prefix = |e: molkv_core::Error, section: &str| match e {
            molkv_core::Error::Config { key, reason } => CliError::config(format!("{section}.{key}"), reason),
            other => CliError::Core(other),
        };
        self.model.validate().map_err(|e| prefix(e, "model"))?;
        self.train.validate().map_err(|e| prefix(e, "train"))?;
        if let Some(t) = self.decode.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::config("decode.temperature", "must be positive"));
            }
        }
        Ok(())
    }

    /// The manifest with every default filled in, as pretty JSON.
    pub fn echo(&self) -> String {
        let mut model = serde_json::to_value(&self.model).expect("config serializes");
        if let Value::Object(m) = &mut model {
            m.remove("kind");
        }
        let v = serde_json::json!({
            "kind": self.kind,
            "model": model,
            "train": self.train,
            "paths": self.paths,
            "decode": self.decode,
        });
        serde_json::to_string_pretty(&v).expect("manifest serializes")
    }

    fn require(&self, p: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        p.clone().ok_or_else(|| CliError::config(format!("paths.{key}"), "required by this subcommand"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "molkv", version, about = "Train, export and decode MoLKV-family language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Reparameterize a checkpoint and write its expert store.
    Export(ExportArgs),
    /// Generate from a checkpoint and its store, reporting per-token costs.
    Decode(DecodeArgs),
    /// Print closed-form costs and parameter counts for a manifest.
    Cost(CostArgs),
    /// Run the acceptance suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stop after this many total steps while keeping the `train.steps` schedule.
    #[arg(long)]
    pub until: Option<usize>,
    /// Checkpoint path, overriding `paths.checkpoint`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the existing checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Store path, overriding `paths.store`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "fp32")]
    pub dtype: StoreDType,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sampling seed; defaults to `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tokens to generate, overriding `decode.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Report path, overriding `paths.report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write the JSON summary here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Skip the training smoke test.
    #[arg(long)]
    pub quick: bool,
    /// Run only these criteria (e.g. `--only AC4 --only AC5`).
    #[arg(long)]
    pub only: Vec<String>,
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => train(a, out),
        Command::Export(a) => export(a, out),
        Command::Decode(a) => decode(a, out),
        Command::Cost(a) => cost(a, out),
        Command::Verify(a) => run_verify(a, out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn load_corpus(m: &RunManifest) -> CliResult<Corpus> {
    Ok(match &m.paths.corpus {
        Some(p) => Corpus::from_file(p, m.train.val_fraction)?,
        None => Corpus::from_bytes(&synthetic_corpus(SYNTHETIC_CORPUS_BYTES, m.train.seed), m.train.val_fraction)?,
    })
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut m = RunManifest::load(&a.manifest)?;
    if let Some(s) = a.seed {
        m.train.seed = s;
    }
    if let Some(s) = a.steps {
        m.train.steps = s;
    }
    m.validate()?;
    if m.model.vocab_size < ByteTokenizer.vocab_size() {
        return Err(CliError::config("model.vocab_size", "byte-level training needs at least 256 ids"));
    }
    let ckpt = match &a.out {
        Some(p) => p.clone(),
        None => m.require(&m.paths.checkpoint, "checkpoint")?,
    };
    eprintln!("{}", m.echo());
    let corpus = load_corpus(&m)?;
    let mut trainer = if a.resume {
        let t = Trainer::load(&ckpt)?;
        if t.model.config != m.model {
            return Err(CliError::config("model", "checkpoint was trained with a different model config"));
        }
        Trainer { config: m.train.clone(), ..t }
    } else {
        Trainer::new(m.model.clone(), m.train.clone())?
    };
    let mut metrics: Option<BufWriter<File>> = match &m.paths.metrics {
        Some(p) => Some(BufWriter::new(
            OpenOptions::new().create(true).append(true).open(p).map_err(|e| CliError::io(p, e))?,
        )),
        None => None,
    };
    let steps = a.until.map_or(m.train.steps, |u| u.min(m.train.steps));
    trainer.run(&corpus, steps, |_, s| {
        let line = s.log_line();
        let res = match metrics.as_mut() {
            Some(w) => writeln!(w, "{line}"),
            None => writeln!(out, "{line}"),
        };
        res.map_err(|e| molkv_core::Error::Training { step: s.step, detail: format!("metrics log: {e}") })
    })?;
    if let Some(w) = metrics.as_mut() {
        w.flush().map_err(|e| CliError::io(m.paths.metrics.as_deref().unwrap(), e))?;
    }
    trainer.save(&ckpt)?;
    let val = if corpus.validation().len() >= 2 {
        format!("{:.6}", evaluate(&trainer.model, corpus.validation(), m.train.seq_length)?)
    } else {
        "n/a".to_string()
    };
    say(out, format!("step={} val_loss={val} checkpoint={}", trainer.step, ckpt.display()))
}

fn load_model(m: &RunManifest) -> CliResult<molkv_core::Model> {
    let path = m.require(&m.paths.checkpoint, "checkpoint")?;
    let t = Trainer::load(&path)?;
    if t.model.config != m.model {
        return Err(CliError::config("model", "checkpoint was trained with a different model config"));
    }
    Ok(t.model)
}

fn export(a: &ExportArgs, out: &mut dyn Write) -> CliResult<()> {
    let m = RunManifest::load(&a.manifest)?;
    if !m.kind.has_experts() {
        return Err(CliError::config("kind", "dense models have no experts to export"));
    }
    let store = match &a.out {
        Some(p) => p.clone(),
        None => m.require(&m.paths.store, "store")?,
    };
    let model = load_model(&m)?;
    let tables = expertstore::reparameterize(&model)?;
    let h = expertstore::write_store(&tables, &store, a.dtype)?;
    say(
        out,
        format!(
            "wrote {}: {} layers x {} ids, {} bytes per record, {} bytes total",
            store.display(),
            h.n_layers,
            h.vocab,
            h.record_bytes(),
            h.file_bytes()
        ),
    )
}

/// One decode-report line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub token_index: usize,
    pub layer: usize,
    pub macs: u64,
    pub params_loaded: u64,
    pub bytes_loaded: u64,
    pub cache_len: usize,
}

fn decode(a: &DecodeArgs, out: &mut dyn Write) -> CliResult<()> {
    let m = RunManifest::load(&a.manifest)?;
    let model = load_model(&m)?;
    let inf = InferenceModel::from_model(&model);
    let reader = if m.kind.has_experts() {
        Some(StoreReader::open(&m.require(&m.paths.store, "store")?)?)
    } else {
        None
    };
    let dec = Decoder::new(&inf, reader.as_ref().map(|r| r as &dyn expertstore::ExpertSource))?;
    let prompt = ByteTokenizer.tokenize(m.decode.prompt.as_bytes());
    if prompt.is_empty() {
        return Err(CliError::config("decode.prompt", "must not be empty"));
    }
    let steps = a.steps.unwrap_or(m.decode.steps);
    let sampler = match m.decode.temperature {
        Some(temperature) => Sampler::Temperature { temperature, seed: a.seed.unwrap_or(m.train.seed) },
        None => Sampler::Greedy,
    };
    let g = dec.generate(&mut dec.new_state(), &prompt, steps, &sampler)?;

    if let Some(path) = a.out.clone().or_else(|| m.paths.report.clone()) {
        let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
        for c in &g.costs {
            let rec = ReportRecord {
                token_index: c.token_index,
                layer: c.layer,
                macs: c.macs,
                params_loaded: c.params_loaded,
                bytes_loaded: c.bytes_loaded,
                cache_len: c.cache_len,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| CliError::io(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }

    let text = ByteTokenizer.detokenize(&g.tokens)?;
    say(out, format!("{}{}", m.decode.prompt, String::from_utf8_lossy(&text)))?;
    let n_tokens = prompt.len() + g.tokens.len();
    say(out, format!("tokens decoded: {n_tokens} ({} prompt, {} generated)", prompt.len(), g.tokens.len()))?;
    say(out, format!("{:>5} {:>14} {:>14} {:>14} {:>9}", "layer", "macs", "params_loaded", "bytes_loaded", "cache_len"))?;
    for l in 0..m.model.n_layers {
        let rows: Vec<_> = g.costs.iter().filter(|c| c.layer == l).collect();
        let macs: u64 = rows.iter().map(|c| c.macs).sum();
        let loaded: u64 = rows.iter().map(|c| c.params_loaded).sum();
        let bytes: u64 = rows.iter().map(|c| c.bytes_loaded).sum();
        let cache = rows.last().map_or(0, |c| c.cache_len);
        say(out, format!("{l:>5} {macs:>14} {loaded:>14} {bytes:>14} {cache:>9}"))?;
    }
    say(
        out,
        format!(
            "total  macs={} params_loaded={} bytes_loaded={}",
            g.total.macs, g.total.params_loaded, g.total.bytes_loaded
        ),
    )
}

fn cost(a: &CostArgs, out: &mut dyn Write) -> CliResult<()> {
    let m = RunManifest::load(&a.manifest)?;
    let row = closed_form_costs(&m.model);
    let counts: Map<String, Value> = ParamConvention::ALL
        .iter()
        .map(|c| (c.as_str().to_string(), Value::from(count_params(&m.model, *c))))
        .collect();
    let le = m.model.n_expert_layers() as u64;
    let loaded = row.loaded * le;
    let summary = serde_json::json!({
        "kind": m.kind,
        "per_expert_layer": row,
        "expert_layers": le,
        "params_loaded_per_token": loaded,
        "bytes_loaded_per_token": { "fp32": loaded * 4, "fp16": loaded * 2 },
        "param_counts": counts,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Some(p) = &a.out {
        std::fs::write(p, &text).map_err(|e| CliError::io(p, e))?;
    }
    say(out, text)
}

fn run_verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut outcomes = Vec::new();
    if a.only.is_empty() {
        outcomes = verify::run_all(a.quick, |o| {
            let _ = writeln!(out, "{o}");
            let _ = out.flush();
        });
    } else {
        for id in &a.only {
            let c = verify::find(id).ok_or_else(|| CliError::config("only", format!("unknown criterion `{id}`")))?;
            let o = c.run();
            say(out, o.to_string())?;
            outcomes.push(o);
        }
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| o.status == Status::Fail).map(|o| o.id).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
