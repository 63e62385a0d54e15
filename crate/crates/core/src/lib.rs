//! Explainability toolkit for binary probabilistic classifiers on tabular data.
//!
//! The crate bundles two reference models (elastic-net logistic regression and a
//! Gini random forest), the global ranking and effect methods built on top of a
//! black-box [`models::ProbabilisticClassifier`], local additive attributions, and
//! the statistics used to measure how much those explanations disagree.
//!
//! Every stochastic method draws its randomness from counter-based substreams of a
//! single run seed (see [`rng`]), so results do not depend on the number of worker
//! threads.

pub mod attributions;
pub mod data;
pub mod disagreement;
pub mod effects;
mod error;
pub mod importance;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
