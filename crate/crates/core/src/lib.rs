//! Order-aware matrix embeddings (CMOW, CBOW and their hybrid, uni- and
//! bidirectional) with masked-language-model pretraining, cross-architecture
//! distillation from precomputed teacher records, and sentence-pair
//! fine-tuning.

// Negated comparisons below deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
