//! Operator commands over `cmow-core`: pretraining, fine-tuning, encoding,
//! evaluation, benchmarking and checkpoint inspection.

pub mod bench;
pub mod config;
pub mod encode;
pub mod eval;
pub mod finetune;
pub mod inputs;
pub mod inspect;
pub mod pretrain;
pub mod report;
