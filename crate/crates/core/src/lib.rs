//! Latent translation between two embedding modalities.
//!
//! Two query-guided transformer decoders translate token embeddings between a
//! visual space and a textual space. They are trained with a bidirectional
//! InfoNCE objective plus a cycle-consistency penalty, at the global (first
//! token) and detail (mean of the remaining tokens) levels. Retrieval happens
//! in the translated space.

pub mod attention;
pub mod bank;
mod binio;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod losses;
pub mod trainer;
pub mod translation;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, Trainer};
pub use translation::{Direction, ModelConfig, TranslationMethod, Translator, TranslatorPair};

/// Single-precision tensor used for training and storage.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used for gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type TranslatorPair32 = TranslatorPair<f32>;
pub type TranslatorPair64 = TranslatorPair<f64>;
