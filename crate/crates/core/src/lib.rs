//! Two-stage generalized zero-shot learning for audio-visual events.
//!
//! Stage one ([`ceo`]) optimizes a dictionary of class embeddings on the unit
//! sphere so that classes are well separated while the ranking of inter-class
//! distances is preserved. Stage two ([`avla`]) trains a cross-attention fusion
//! model over precomputed audio and visual features, aligning the fused
//! representation to the frozen class embeddings with a supervised contrastive
//! objective. [`evaluation`] scores a trained model under the seen/unseen
//! protocol and [`synth`] generates seeded benchmarks for desk-scale runs.


pub mod avla;
pub mod ceo;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use numerics::Tensor2;
