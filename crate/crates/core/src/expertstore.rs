//! Reparameterized expert tables and the `MLKV` store file.
//!
//! # File layout
//!
//! All integers little-endian. A 64-byte header:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"MLKV"`                         |
//! | 4      | 2    | format version (1)                      |
//! | 6      | 1    | model kind: 1 = MoLE, 2 = MoLKV         |
//! | 7      | 1    | dtype: 1 = fp16, 2 = fp32, 3 = fp64     |
//! | 8      | 4    | expert layer count `L_e`                |
//! | 12     | 4    | vocabulary size `|V|`                   |
//! | 16     | 4    | experts per id `N`                      |
//! | 20     | 4    | hidden size `d`                         |
//! | 24     | 4    | key size `d′` (0 for MoLE)              |
//! | 28     | 4    | layout constant (1)                     |
//! | 32     | 32   | zero                                    |
//!
//! followed by `L_e·|V|` records, layer-major then id-major. A record holds, for
//! each expert `n` in order, `d′` key values then `d` value entries, so every
//! record is `N·(d+d′)` elements and record `(l, i)` starts at
//! `64 + (l·|V| + i)·N·(d+d′)·dtype_size`. Keys are stored after the key norm;
//! values are stored raw.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::model::{ExpertBlock, Model};
use crate::mole::{self, MoleValueTable};
use crate::molkv;

pub const MAGIC: [u8; 4] = *b"MLKV";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 64;
pub const LAYOUT_LAYER_ID_KEY_VALUE: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreDType {
    Fp16,
    Fp32,
    Fp64,
}

impl StoreDType {
    pub fn size(self) -> usize {
        match self {
            StoreDType::Fp16 => 2,
            StoreDType::Fp32 => 4,
            StoreDType::Fp64 => 8,
        }
    }

    fn code(self) -> u8 {
        match self {
            StoreDType::Fp16 => 1,
            StoreDType::Fp32 => 2,
            StoreDType::Fp64 => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(StoreDType::Fp16),
            2 => Ok(StoreDType::Fp32),
            3 => Ok(StoreDType::Fp64),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    /// Rounds `v` to this dtype.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            StoreDType::Fp16 => half::f16::from_f64(v).to_f64(),
            StoreDType::Fp32 => v as f32 as f64,
            StoreDType::Fp64 => v,
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            StoreDType::Fp16 => out.extend_from_slice(&half::f16::from_f64(v).to_le_bytes()),
            StoreDType::Fp32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            StoreDType::Fp64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            StoreDType::Fp16 => bytes
                .chunks_exact(2)
                .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
            StoreDType::Fp32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            StoreDType::Fp64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        }
    }
}

impl std::str::FromStr for StoreDType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp16" => Ok(StoreDType::Fp16),
            "fp32" => Ok(StoreDType::Fp32),
            "fp64" => Ok(StoreDType::Fp64),
            _ => Err(Error::config("dtype", format!("expected fp16, fp32 or fp64, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreKind {
    Mole,
    Molkv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u16,
    pub kind: StoreKind,
    pub dtype: StoreDType,
    pub n_layers: usize,
    pub vocab: usize,
    pub n_experts: usize,
    pub d: usize,
    pub key_dim: usize,
    pub layout: u32,
}

impl StoreHeader {
    pub fn for_config(cfg: &ModelConfig, dtype: StoreDType) -> Result<Self> {
        let kind = match cfg.kind {
            ModelKind::Dense => return Err(Error::config("kind", "dense models have no experts to store")),
            ModelKind::Mole | ModelKind::GatedMole => StoreKind::Mole,
            ModelKind::Molkv => StoreKind::Molkv,
        };
        let h = Self {
            version: FORMAT_VERSION,
            kind,
            dtype,
            n_layers: cfg.n_expert_layers(),
            vocab: cfg.vocab_size,
            n_experts: cfg.n_experts,
            d: cfg.d_model,
            key_dim: cfg.key_dim,
            layout: LAYOUT_LAYER_ID_KEY_VALUE,
        };
        h.validate()?;
        Ok(h)
    }

    /// Parameters per record: `N·(d+d′)`.
    pub fn record_params(&self) -> usize {
        self.n_experts * (self.d + self.key_dim)
    }

    pub fn record_bytes(&self) -> usize {
        self.record_params() * self.dtype.size()
    }

    pub fn n_records(&self) -> usize {
        self.n_layers * self.vocab
    }

    pub fn file_bytes(&self) -> u64 {
        HEADER_BYTES as u64 + (self.n_records() * self.record_bytes()) as u64
    }

    fn check_index(&self, layer: usize, id: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::Lookup(format!(
                "expert layer {layer} out of range for {} layers",
                self.n_layers
            )));
        }
        if id >= self.vocab {
            return Err(Error::Lookup(format!("id {id} out of range for vocabulary {}", self.vocab)));
        }
        Ok(())
    }

    /// Byte offset of record `(layer, id)` in the file.
    pub fn record_offset(&self, layer: usize, id: usize) -> Result<u64> {
        self.check_index(layer, id)?;
        Ok(HEADER_BYTES as u64 + ((layer * self.vocab + id) * self.record_bytes()) as u64)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("expert layer count", self.n_layers),
            ("vocabulary size", self.vocab),
            ("expert count", self.n_experts),
            ("hidden size", self.d),
        ] {
            if v == 0 {
                return Err(Error::Format(format!("{name} must be at least 1")));
            }
        }
        match (self.kind, self.key_dim) {
            (StoreKind::Mole, 0) => {}
            (StoreKind::Mole, _) => return Err(Error::Format("MoLE store with nonzero key size".into())),
            (StoreKind::Molkv, 0) => return Err(Error::Format("MoLKV store with zero key size".into())),
            (StoreKind::Molkv, _) => {}
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut b = [0u8; HEADER_BYTES];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6] = match self.kind {
            StoreKind::Mole => 1,
            StoreKind::Molkv => 2,
        };
        b[7] = self.dtype.code();
        let fields = [self.n_layers, self.vocab, self.n_experts, self.d, self.key_dim];
        for (i, v) in fields.iter().enumerate() {
            let at = 8 + 4 * i;
            b[at..at + 4].copy_from_slice(&(*v as u32).to_le_bytes());
        }
        b[28..32].copy_from_slice(&self.layout.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_BYTES {
            return Err(Error::Format(format!("header needs {HEADER_BYTES} bytes, got {}", b.len())));
        }
        if b[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &b[0..4])));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let kind = match b[6] {
            1 => StoreKind::Mole,
            2 => StoreKind::Molkv,
            k => return Err(Error::Format(format!("unknown model kind code {k}"))),
        };
        let dtype = StoreDType::from_code(b[7])?;
        let u = |at: usize| u32::from_le_bytes(b[at..at + 4].try_into().unwrap()) as usize;
        let layout = u(28) as u32;
        if layout != LAYOUT_LAYER_ID_KEY_VALUE {
            return Err(Error::Format(format!("unknown layout constant {layout}")));
        }
        let h = Self {
            version,
            kind,
            dtype,
            n_layers: u(8),
            vocab: u(12),
            n_experts: u(16),
            d: u(20),
            key_dim: u(24),
            layout,
        };
        h.validate()?;
        Ok(h)
    }
}

/// The `N` experts of one id in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRecord {
    pub n_experts: usize,
    pub d: usize,
    pub key_dim: usize,
    /// Record elements in file order.
    pub data: Vec<f64>,
}

impl ExpertRecord {
    fn stride(&self) -> usize {
        self.d + self.key_dim
    }

    /// Post-norm key of expert `n` (empty for MoLE).
    pub fn key(&self, n: usize) -> &[f64] {
        let at = n * self.stride();
        &self.data[at..at + self.key_dim]
    }

    /// Raw value of expert `n`.
    pub fn value(&self, n: usize) -> &[f64] {
        let at = n * self.stride() + self.key_dim;
        &self.data[at..at + self.d]
    }

    /// All values, expert-major: the MoLE lookup vector.
    pub fn values_flat(&self) -> Vec<f64> {
        (0..self.n_experts).flat_map(|n| self.value(n).to_vec()).collect()
    }
}

/// Anything that can hand out expert records by `(expert layer, id)`.
pub trait ExpertSource: Sync {
    fn header(&self) -> &StoreHeader;
    fn fetch(&self, layer: usize, id: usize) -> Result<ExpertRecord>;
}

/// Reparameterized experts of every expert layer, in memory at fp64, laid out
/// exactly like the store body.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTables {
    header: StoreHeader,
    data: Vec<f64>,
}

impl ExpertTables {
    pub fn new(header: StoreHeader, data: Vec<f64>) -> Result<Self> {
        if data.len() != header.n_records() * header.record_params() {
            return Err(Error::Dimension(format!(
                "{} table entries for {} records of {}",
                data.len(),
                header.n_records(),
                header.record_params()
            )));
        }
        Ok(Self { header: StoreHeader { dtype: StoreDType::Fp64, ..header }, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn record(&self, layer: usize, id: usize) -> Result<ExpertRecord> {
        self.header.check_index(layer, id)?;
        let w = self.header.record_params();
        let at = (layer * self.header.vocab + id) * w;
        Ok(ExpertRecord {
            n_experts: self.header.n_experts,
            d: self.header.d,
            key_dim: self.header.key_dim,
            data: self.data[at..at + w].to_vec(),
        })
    }

    /// Copy with every entry rounded to `dtype`.
    pub fn quantized(&self, dtype: StoreDType) -> Self {
        Self {
            header: self.header,
            data: self.data.iter().map(|&v| dtype.quantize(v)).collect(),
        }
    }

    /// The MoLE value table of one expert layer.
    pub fn mole_table(&self, layer: usize) -> Result<MoleValueTable> {
        let h = &self.header;
        if h.kind != StoreKind::Mole {
            return Err(Error::Contract("not a MoLE store".into()));
        }
        h.check_index(layer, 0)?;
        let w = h.record_params() * h.vocab;
        MoleValueTable::new(h.vocab, h.n_experts, h.d, self.data[layer * w..(layer + 1) * w].to_vec())
    }
}

impl ExpertSource for ExpertTables {
    fn header(&self) -> &StoreHeader {
        &self.header
    }

    fn fetch(&self, layer: usize, id: usize) -> Result<ExpertRecord> {
        self.record(layer, id)
    }
}

/// Freezes every expert layer of a trained model into lookup tables.
///
/// MoLE stores `v_{i,n} = FFNₙ(e_i)`; MoLKV stores post-norm keys and raw values.
pub fn reparameterize(model: &Model) -> Result<ExpertTables> {
    let cfg = &model.config;
    let header = StoreHeader::for_config(cfg, StoreDType::Fp64)?;
    let embed = &model.params.embed;
    let mut data = Vec::with_capacity(header.n_records() * header.record_params());
    for &l in &cfg.expert_layers {
        match &model.params.layers[l].experts {
            Some(ExpertBlock::Mole(b)) => {
                let table = mole::reparameterize(b, embed)?;
                for id in 0..cfg.vocab_size {
                    data.extend_from_slice(table.lookup(id)?);
                }
            }
            Some(ExpertBlock::Molkv(b)) => {
                for id in 0..cfg.vocab_size {
                    for kv in molkv::compute_expert_kv(embed.row_slice(id), b, cfg.norm_eps) {
                        data.extend_from_slice(&kv.key);
                        data.extend_from_slice(&kv.value_raw);
                    }
                }
            }
            None => return Err(Error::Contract(format!("layer {l} is listed as an expert layer but has no experts"))),
        }
    }
    ExpertTables::new(header, data)
}

/// Writes `tables` to `path` at `dtype`.
pub fn write_store(tables: &ExpertTables, path: &Path, dtype: StoreDType) -> Result<StoreHeader> {
    let header = StoreHeader { dtype, ..tables.header };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&header.encode()).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(header.record_bytes());
    for record in tables.data.chunks_exact(header.record_params()) {
        buf.clear();
        for &v in record {
            dtype.encode(v, &mut buf);
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(header)
}

/// Read handle over a store file. Each read fetches exactly one record by offset.
#[derive(Debug)]
pub struct StoreReader {
    path: PathBuf,
    file: File,
    header: StoreHeader,
    bytes_read: AtomicU64,
    reads: AtomicU64,
}

impl StoreReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = [0u8; HEADER_BYTES];
        read_at(&file, &mut head, 0).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("file shorter than the header".into()),
            _ => Error::io(path, e),
        })?;
        let header = StoreHeader::decode(&head)?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len != header.file_bytes() {
            return Err(Error::Format(format!(
                "file holds {len} bytes, header implies {}",
                header.file_bytes()
            )));
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            header,
            bytes_read: AtomicU64::new(0),
            reads: AtomicU64::new(0),
        })
    }

    pub fn read_record(&self, layer: usize, id: usize) -> Result<ExpertRecord> {
        let offset = self.header.record_offset(layer, id)?;
        let mut buf = vec![0u8; self.header.record_bytes()];
        read_at(&self.file, &mut buf, offset).map_err(|e| Error::io(&self.path, e))?;
        self.bytes_read.fetch_add(buf.len() as u64, Ordering::Relaxed);
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(ExpertRecord {
            n_experts: self.header.n_experts,
            d: self.header.d,
            key_dim: self.header.key_dim,
            data: self.header.dtype.decode(&buf),
        })
    }

    /// Total bytes transferred by record reads on this handle.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Loads every record into memory at fp64.
    pub fn read_all(&self) -> Result<ExpertTables> {
        let h = self.header;
        let mut data = Vec::with_capacity(h.n_records() * h.record_params());
        for l in 0..h.n_layers {
            for id in 0..h.vocab {
                data.extend(self.read_record(l, id)?.data);
            }
        }
        ExpertTables::new(h, data)
    }
}

impl ExpertSource for StoreReader {
    fn header(&self) -> &StoreHeader {
        &self.header
    }

    fn fetch(&self, layer: usize, id: usize) -> Result<ExpertRecord> {
        self.read_record(layer, id)
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(not(unix))]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = file.try_clone()?;
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)
}

/// Which parameters a count includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamConvention {
    /// Offloaded expert tables only: `N·|V|·(d+d′)` per expert layer.
    ExpertsOnly,
    /// Everything resident in memory at inference: embeddings, output head,
    /// attention, FFNs, norms, routers, gates and query projections.
    BackboneOnly,
    /// `BackboneOnly` without the input embedding and output head.
    NonEmbeddingBackbone,
    ExpertsPlusBackbone,
}

impl ParamConvention {
    pub const ALL: [ParamConvention; 4] = [
        ParamConvention::ExpertsOnly,
        ParamConvention::BackboneOnly,
        ParamConvention::NonEmbeddingBackbone,
        ParamConvention::ExpertsPlusBackbone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamConvention::ExpertsOnly => "experts-only",
            ParamConvention::BackboneOnly => "backbone-only",
            ParamConvention::NonEmbeddingBackbone => "non-embedding-backbone",
            ParamConvention::ExpertsPlusBackbone => "experts+backbone",
        }
    }
}

/// Closed-form parameter count of an inference-mode model.
pub fn count_params(cfg: &ModelConfig, convention: ParamConvention) -> u64 {
    let (d, ff, n, v, dk) = (
        cfg.d_model as u64,
        cfg.d_ff as u64,
        cfg.n_experts as u64,
        cfg.vocab_size as u64,
        cfg.key_dim as u64,
    );
    let le = cfg.n_expert_layers() as u64;
    let experts = n * v * (d + dk) * le;
    let per_layer = 4 * d * d + 3 * d * ff + 2 * d;
    let per_expert_layer = match cfg.kind {
        ModelKind::Dense => 0,
        ModelKind::Mole => n * d,
        ModelKind::GatedMole => n * d + d,
        ModelKind::Molkv => dk * d + 2 * n * d + 2 * d + d,
    };
    let non_embedding = cfg.n_layers as u64 * per_layer + le * per_expert_layer + d;
    let backbone = non_embedding + 2 * v * d;
    match convention {
        ParamConvention::ExpertsOnly => experts,
        ParamConvention::BackboneOnly => backbone,
        ParamConvention::NonEmbeddingBackbone => non_embedding,
        ParamConvention::ExpertsPlusBackbone => experts + backbone,
    }
}
