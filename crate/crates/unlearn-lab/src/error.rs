//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by graph construction, models, data handling and runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("backward root node {node} is not scalar (shape {shape:?})")]
    NonScalarRoot { node: usize, shape: Vec<usize> },

    #[error("token {token} out of vocabulary (size {vocab})")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("character {0:?} not in tokenizer vocabulary")]
    UnknownChar(char),

    #[error("empty prefix: at least one context token is required")]
    EmptyPrefix,

    #[error("sequence of {0} tokens is too short; need at least 2")]
    SequenceTooShort(usize),

    #[error("prefix of {len} tokens exceeds context length {max}")]
    PrefixTooLong { len: usize, max: usize },

    #[error("vocabulary of size {0} too small for this operation")]
    VocabTooSmall(usize),

    #[error("non-finite loss at optimizer step {step}")]
    NanLoss { step: usize },

    #[error("training data is empty")]
    EmptyData,

    #[error("transition matrix row {row} sums to {sum}, expected 1")]
    NonStochasticRow { row: usize, sum: f64 },

    #[error("forget fraction {0} must lie strictly between 0 and 1")]
    InvalidForgetFraction(f64),

    #[error("could not draw {needed} approximate sequences disjoint from the corpus")]
    ApproxSetExhausted { needed: usize },

    #[error("Renyi divergence of order 1 is undefined; use KL divergence instead")]
    RenyiAlphaOne,

    #[error("invalid Renyi order {0}: alpha must be positive and not 1")]
    RenyiAlphaInvalid(f64),

    #[error("unknown unlearning method {0:?}")]
    UnknownMethod(String),

    #[error(
        "forget-ppl target {target} not bracketed by coarse grid: \
         lr {lo_lr} gives ppl {lo_ppl}, lr {hi_lr} gives ppl {hi_ppl}"
    )]
    TargetNotBracketed {
        target: f64,
        lo_lr: f64,
        lo_ppl: f64,
        hi_lr: f64,
        hi_ppl: f64,
    },

    #[error("Newton block for context token {context} is singular despite damping")]
    SingularNewtonBlock { context: usize },

    #[error("invalid metrics report: {0}")]
    InvalidReport(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
