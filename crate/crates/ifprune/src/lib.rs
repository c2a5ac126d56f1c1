//! Prompt-conditioned structured pruning for small decoder-only transformers.
//!
//! A sparsity predictor reads a prompt and scores every FFN channel of a
//! maskable transformer; a differentiable top-k relaxation turns the scores
//! into a near-binary mask over FFN rows/columns. Predictor and model are
//! trained jointly, so the mask a prompt selects is a sub-network specialized
//! for that prompt. A selected sub-network can be materialized as a genuinely
//! smaller dense model whose logits match the masked parent to float
//! round-off.
//!
//! The crate is organized as a library plus one thin `ifprune` binary that
//! exposes the pipeline as subcommands (`gen-data`, `train-cpt`, `train-sft`,
//! `train-static`, `eval`, `predict-mask`, `export-pruned`, `check-equiv`,
//! `overlap`, `grad-check`). The `examples/` directory is the front door:
//!
//! ```text
//! cargo run --release -p ifprune --example gen_data
//! cargo run --release -p ifprune --example grad_check
//! cargo run --release -p ifprune --example train_cpt
//! cargo run --release -p ifprune --example train_sft
//! cargo run --release -p ifprune --example train_static_baseline
//! cargo run --release -p ifprune --example evaluate_mask_modes
//! cargo run --release -p ifprune --example prune_and_check
//! cargo run --release -p ifprune --example overlap_analysis
//! ```
//!
//! Module map:
//!
//! - [`tensor`]: define-by-run f64 autodiff graph (matmul, attention, norms,
//!   masked cross-entropy, ...) plus a finite-difference gradient checker.
//! - [`softtopk`]: the budgeted top-k relaxation and its exact backward pass.
//! - [`model`]: the maskable transformer (RMS norm, causal attention, SwiGLU
//!   FFN with a per-layer channel mask, tied embeddings).
//! - [`predictor`]: the smaller transformer that maps a prompt to per-layer
//!   channel scores and masks.
//! - [`datagen`]: deterministic synthetic corpora over a 64-symbol alphabet
//!   (arithmetic chains, string ops, substitution cipher) with rule-based
//!   oracles.
//! - [`trainer`]: chunked continued-pretraining objective, prompt-masked SFT,
//!   AdamW-style optimizer, evaluation with interchangeable mask modes, and
//!   the static-mask baseline.
//! - [`pruner`]: exact sub-network materialization and masked-vs-pruned
//!   equivalence checks.
//! - [`overlap`]: mask overlap statistics across prompts and domains, CSV
//!   export, permutation tests.
//! - [`checkpoint`]: binary tensor snapshots (32-bit storage, 64-bit compute).
//! - [`kvconfig`]: the flat `key=value` config format shared by config files
//!   and checkpoint headers.
//! - [`cli`]: the subcommand layer used by the `ifprune` binary.

pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod kvconfig;
pub mod model;
pub mod overlap;
pub mod params;
pub mod predictor;
pub mod pruner;
pub mod rng;
pub mod softtopk;
pub mod tensor;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to name the offending
/// shape, field, or file in one line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a finite scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("top-k budget t={t} invalid for dimension d={d}")]
    BadBudget { t: usize, d: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("cross-entropy: no unmasked positions")]
    AllPositionsMasked,
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("empty response")]
    EmptyResponse,
    #[error("character {ch:?} at position {pos} is outside the alphabet")]
    OutsideAlphabet { ch: char, pos: usize },
    #[error("config field {field}: {msg}")]
    Config { field: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint: tensor {name} truncated or malformed")]
    TruncatedTensor { name: String },
    #[error("training diverged at step {step}; last good step {last_good}")]
    Diverged { step: usize, last_good: usize },
    #[error("mask has t={mask_t} selected channels per layer, checkpoint expects t_ffn={expected}")]
    BudgetMismatch { mask_t: usize, expected: usize },
    #[error("mask has {mask_layers} layers, model has {model_layers}")]
    LayerCountMismatch {
        mask_layers: usize,
        model_layers: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
