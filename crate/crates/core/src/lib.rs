//! Layer-pruning laboratory for decoder-only transformers.
//!
//! The crate trains small Llama-style models on the CPU, scores their blocks
//! with seven importance metrics, removes blocks one-shot or iteratively,
//! recovers with low-rank adapters or partial-layer fine-tuning and reports
//! perplexity, multiple-choice accuracy, parameters and MACs.
//!
//! Modules build on each other bottom-up: [`numeric`] → [`model`] →
//! [`data`] → [`metrics`] / [`finetune`] → [`pruning`] → [`evalkit`] →
//! [`cli`].

pub mod cli;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pruning;

pub use error::{Error, Result};
