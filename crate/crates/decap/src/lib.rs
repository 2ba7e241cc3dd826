//! decap — desk-scale end-to-end video captioning.
//!
//! The pipeline decouples video understanding into per-frame spatial
//! encoding (a small vision transformer read out at its class token),
//! residual-aware temporal fusion (difference tokens interleaved between
//! frame tokens), and syntax-aware decoding (a causal language model
//! supplies a syntactic feature that is fused into the decoder's memory
//! and query at every step). Training runs cross-entropy first, then
//! switches to self-critical sequence training with a CIDEr-D reward and
//! a mean-of-samples baseline.
//!
//! Everything runs on a built-in reverse-mode autodiff tape in `f64`;
//! gradients are verified against central finite differences.
//!
//! Start with the runnable examples (`cargo run --release --example …`):
//!
//! - `gradcheck_suite` — finite-difference verification of every primitive
//!   and of a pixels-to-loss micro model
//! - `generate_dataset` — render a synthetic moving-shapes dataset
//! - `train_syntax_lm` — train the causal LM on caption sentences
//! - `overfit_small` — memorize a handful of clip/caption pairs end to end
//! - `scst_finetune` — self-critical fine-tuning from a checkpoint
//! - `evaluate` — greedy-decode a split and score BLEU@4 / ROUGE-L / CIDEr-D
//! - `caption_clip` — caption a single `.rawvid` file
//! - `ablation_arms` — compare residual/temporal attention arms
//!
//! The same capabilities are reachable through the thin `decap` binary
//! (`gen-data`, `train-lm`, `train`, `eval`, `caption`, `gradcheck`).

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod ratb;
pub mod spatial;
pub mod syntax;
pub mod tensor;
pub mod training;

pub mod cli;

pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::{Tape, Tensor};
