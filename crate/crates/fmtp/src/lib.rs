//! Fragmented-memory trajectory prediction.
//!
//! Trajectories are compressed into a learnable discrete memory array: two
//! encoders map observed and future trajectory windows to continuous
//! features, each feature is snapped to its nearest memory entry, and a
//! decoder reconstructs coordinates from the quantized sequence. Prediction
//! then becomes sequence completion: a small transformer with a semi-causal
//! (prefix) attention mask models the index sequences and samples future
//! tokens autoregressively; decoded samples are scored with best-of-K
//! ADE/FDE against a constant-velocity baseline.
//!
//! Modules:
//! - [`num`]: tensors, reverse-mode tape, Adam, seeded PRNG, gradient checks.
//! - [`data`]: trajectory model, text ingestion, synthetic corpus generator.
//! - [`vq`]: encoders, memory array with straight-through quantization,
//!   decoder, tokenizer.
//! - [`lm`]: semi-causal sequence model, training, ancestral sampling.
//! - [`eval`]: ADE/FDE best-of-K metrics, end-to-end prediction, benchmarks,
//!   ablation harnesses.
//! - [`cli`]: subcommand implementations behind the `fmtp` binary.

mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod lm;
pub mod num;
pub mod vq;
