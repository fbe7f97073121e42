//! PHI detection pipeline benchmark: synthetic imprint datasets, pluggable
//! stage backends, the tagged-string analysis protocol, a sequential
//! three-stage orchestrator and the evaluation metrics.

pub mod backends;
pub mod dataset;
pub mod domain;
pub mod lexicon;
pub mod metrics;
pub mod orchestrator;
pub mod protocol;
pub mod rng;

pub use domain::*;
