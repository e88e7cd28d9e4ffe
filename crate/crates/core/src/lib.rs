//! Backdoor removal for small classifiers via minimax unlearning with
//! implicit hypergradients.
//!
//! The pipeline at a glance: poison a dataset with norm-bounded triggers
//! ([`poison`]), train an MLP on it ([`model`]), then sanitize the model
//! using only clean data by alternating an inner universal-perturbation
//! ascent ([`inner_max`]) with outer descent along the implicit
//! hypergradient ([`hypergrad`], [`unlearn`]). Attack success and
//! generalization diagnostics live in [`metrics`]; the `ibau` binary wires
//! everything into reproducible experiments ([`cli`]).
//!
//! Everything is float64, deterministic under explicit seeds, and built on a
//! small tape-based reverse-mode engine ([`autodiff`]) over dense tensors
//! ([`tensor`]).

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod hypergrad;
pub mod inner_max;
pub mod metrics;
pub mod model;
pub mod poison;
pub mod rng;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
