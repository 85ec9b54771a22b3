//! Lightweight zero-shot TTS acoustic model whose decoder and variance
//! predictors carry mixture-of-adapters modules gated by a speaker
//! embedding, plus the synthetic corpus, training loop and evaluation
//! tooling around it.
//!
//! Everything runs on a small f64 tape autodiff engine in [`tensor`].

pub mod cache;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod layers;
pub mod moa;
pub mod model;
pub mod params;
pub mod speaker;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, MoaConfig, Sites, TtsModel};
pub use moa::{MoaModule, Routing};
pub use tensor::{Graph, Tensor, Var};
pub use train::TrainConfig;
