//! Mixture of lookup key-value experts (MoLKV) and its MoLE baselines.
//!
//! Training-mode blocks run on a reverse-mode [`numerics::Tape`]; after training,
//! [`expertstore::reparameterize`] freezes the per-id experts into lookup tables
//! that [`runtime`] decodes against one token at a time.

pub mod config;
pub mod error;
pub mod expertstore;
pub mod layers;
pub mod model;
pub mod mole;
pub mod molkv;
pub mod numerics;
pub mod params;
pub mod runtime;
pub mod train;
pub mod verify;

pub use config::{ModelConfig, ModelKind};
pub use error::{Error, Result};
pub use model::{InferenceModel, Model};
pub use numerics::{Tape, Tensor, Var};
