//! Just-in-time defect prediction: commit risk from a random forest over
//! code tokens and change metrics, effort-aware ranking, and line-level
//! explanations of risky commits.

pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod features;
pub mod forest;
pub mod pipeline;
pub mod rebalance;
pub mod synth;

pub use error::{Error, Result};
