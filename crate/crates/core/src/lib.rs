//! Conditional concept bottleneck models with an LLM-driven concept agent.
//!
//! The crate is organized around the agent's lifecycle:
//!
//! - [`bank`]: the versioned concept bank, the agent's persistent memory,
//!   and the editable (fact-compatibility) matrix.
//! - [`backends`]: pluggable text/image encoders and LLM transports, with
//!   deterministic synthetic implementations for offline verification.
//! - [`cocobm`]: the conditional bottleneck itself: per-(label, concept)
//!   prompt construction, scoring with editable-matrix clamping, label
//!   aggregation, the weighted BCE objective, and gradient training of the
//!   condition tokens and aggregation weights.
//! - [`actions`]: concept generation, learning-to-search selection, fact
//!   verification, k-means instance selection, and environment perception.
//! - [`planner`]: feedback analysis (score/activation patterns, redundancy
//!   and insufficiency rules) and the iterative grounding loop.
//! - [`evaluate`]: the MCQ-based interpretability harness (truthfulness
//!   and distinguishability with an LLM judge).
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common `f64` instantiation.

pub mod actions;
pub mod backends;
pub mod bank;
pub mod cocobm;
pub mod error;
pub mod evaluate;
pub mod planner;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for end-to-end runs.
pub type DefaultScalar = f64;

pub type Embedding32 = backends::Embedding<f32>;
pub type Embedding64 = backends::Embedding<f64>;
pub type Sample64 = backends::Sample<DefaultScalar>;
pub type Dataset64 = backends::Dataset<DefaultScalar>;
pub type ScoreTensor64 = cocobm::ScoreTensor<DefaultScalar>;
pub type TrainedModel64 = cocobm::TrainedModel<DefaultScalar>;
