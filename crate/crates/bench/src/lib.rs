//! Fixtures shared by the criterion benches.

use molkv_core::expertstore::{self, ExpertTables, StoreDType, StoreReader};
use molkv_core::{InferenceModel, ModelConfig, ModelKind};
use tempfile::TempDir;

/// A random inference model with its expert tables written to a temporary store.
pub struct Fixture {
    pub model: InferenceModel,
    pub store: Option<StoreReader>,
    _dir: TempDir,
}

impl Fixture {
    pub fn new(config: ModelConfig, dtype: StoreDType) -> Result<Self, Box<dyn std::error::Error>> {
        let model = InferenceModel::random(config.clone(), 7, 0.02)?;
        let dir = tempfile::tempdir()?;
        let store = if config.kind.has_experts() {
            let header = expertstore::StoreHeader::for_config(&config, StoreDType::Fp64)?;
            let data = (0..header.n_records() * header.record_params())
                .map(|i| ((i * 2_654_435_761) % 1000) as f64 / 1000.0 - 0.5)
                .collect();
            let path = dir.path().join("bench.mlkv");
            expertstore::write_store(&ExpertTables::new(header, data)?, &path, dtype)?;
            Some(StoreReader::open(&path)?)
        } else {
            None
        };
        Ok(Self { model, store, _dir: dir })
    }

    pub fn source(&self) -> Option<&dyn expertstore::ExpertSource> {
        self.store.as_ref().map(|s| s as &dyn expertstore::ExpertSource)
    }
}

/// A mid-sized single-layer configuration of `kind` for per-token timing.
pub fn medium(kind: ModelKind) -> ModelConfig {
    let tiny = ModelConfig::tiny(kind);
    let molkv = kind == ModelKind::Molkv;
    ModelConfig {
        n_layers: 2,
        d_model: 256,
        d_ff: 640,
        vocab_size: 4096,
        key_dim: if molkv { 64 } else { 0 },
        window: if molkv { 128 } else { 0 },
        top_k: if molkv { 16 } else { 0 },
        n_heads: Some(4),
        ..tiny
    }
}

pub const KINDS: [ModelKind; 4] = [ModelKind::Dense, ModelKind::Mole, ModelKind::GatedMole, ModelKind::Molkv];
