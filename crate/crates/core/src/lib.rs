//! Memory-based jitter for long-tailed recognition.
//!
//! A model is first trained conventionally; a short fine-tuning phase then
//! adds a loss over a small FIFO memory of historical features (classification)
//! or classifier prototypes (metric learning), admitted with tail-biased
//! probabilities.

pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod memory;
pub mod model;
pub mod retrieval;
mod scalar;
pub mod train;

pub use error::{ErrorCategory, MbjError, Result};
pub use scalar::Scalar;

/// Single-precision concrete types used by the command-line runner.
pub type Model = model::EmbeddingModel<f32>;
pub type Data = data::Dataset<f32>;
pub type Bank = memory::MemoryBank<f32>;
pub type Outcome = train::PhaseOutcome<f32>;

/// Double-precision counterparts, used for gradient checks.
pub type Model64 = model::EmbeddingModel<f64>;
pub type Data64 = data::Dataset<f64>;
pub type Bank64 = memory::MemoryBank<f64>;
