//! Desk-scale laboratory for machine unlearning of autoregressive language
//! models.
//!
//! Tiny models make the gold standard affordable: a model retrained from
//! scratch without the forget set is computed directly and every unlearning
//! method is judged against it. The crate provides
//!
//! - [`autodiff`]: reverse-mode differentiation over dense f64 arrays;
//! - [`lm`]: a tiny decoder transformer and a convex softmax bigram with
//!   NLL training;
//! - [`corpus`]: synthetic corpora with known statistics and the data
//!   splits (forget / retain / approximate / general);
//! - [`unlearn`]: the unified first-order unlearning update, its method
//!   instances, the retraining oracle and a Newton step for the bigram;
//! - [`eval`]: perplexity, accuracy, Min-K% membership inference with AUC,
//!   approximate-retraining targets, and behavioral (Renyi / sup-probability)
//!   measures;
//! - [`cost`]: the FLOPs cost model for retraining versus unlearning;
//! - [`harness`]: seeded end-to-end experiments, hyperparameter search and
//!   sweeps, and JSON/CSV report emission.

pub mod autodiff;
pub mod corpus;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod eval;
pub mod lm;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
