//! Continued pre-training laboratory for small decoder-only transformers.
//!
//! The crate scores every decoder block by the angular change it applies to
//! the residual stream, picks the most important blocks, and then either
//! unfreezes them, inserts fresh blocks right after them, or both. Full
//! continued pre-training and LoRA are provided as comparison arms, along
//! with the perplexity / choice-task evaluation used to measure forgetting.
//!
//! Module map:
//!
//! * [`numerics`]: dense tensors and a reverse-mode autodiff tape.
//! * [`model`]: the transformer, freeze masks and activation capture.
//! * [`surgery`]: block importance, block selection, freezing and expansion.
//! * [`data`]: tokenizers, synthetic corpora, splits, mixing and batching.
//! * [`training`]: cosine schedule, AdamW, the training loop and run logs.
//! * [`baselines`]: LoRA adapters and full continued pre-training.
//! * [`eval`]: perplexity, choice accuracy, improvement tables, forgetting.
//! * [`cli`]: experiment configs, checkpoints and the pipeline commands.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod surgery;
pub mod training;

pub use error::{AdeError, Result};
