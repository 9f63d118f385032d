//! Text image translation with a multimodal codebook.
//!
//! The crate bundles a small reverse-mode differentiation substrate, the
//! codebook quantizer with EMA maintenance, the encoder/decoder networks,
//! synthetic data generation, the four-stage training pipeline and the
//! evaluation tools (beam search, BLEU, recognition accuracy, codebook
//! inspection, ablations).

pub mod codebook;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
