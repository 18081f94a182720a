//! Distillation of a probabilistic sequence risk model into an interpretable
//! two-latent Bayesian surrogate, with population-level association analysis
//! and per-patient record selection.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod bayes;
pub mod cohort;
pub mod error;
pub mod explainer;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod predictive;
pub mod rng;
pub mod student;
pub mod teacher;

pub use error::{Error, Result};
pub use predictive::PredictiveDistribution;
