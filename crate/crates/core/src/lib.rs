//! Group-fairness auditing of binary classifiers with Efficient-Symmetric-Linear
//! (ESL) game values: group allocations, feature-level decompositions,
//! asymptotic tests and a stratified bootstrap.

pub mod bootstrap;
pub mod cli;
pub mod coalition;
pub mod dataset;
pub mod error;
pub mod esl;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod report;

pub use coalition::Coalition;
pub use error::{Error, Result};
pub use esl::EslFamily;
pub use metrics::MetricKind;
