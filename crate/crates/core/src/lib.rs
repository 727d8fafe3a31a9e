//! Joint pruning + backdoor training for image classifiers.
//!
//! The crate trains sparse backdoored models by learning pruning masks,
//! additive trigger patterns and weights against a unified objective, plus
//! the sequential prune/backdoor baselines and a battery of defense
//! evaluations (fine-pruning, input-superimposition entropy, reverse-
//! engineered trigger anomaly detection, attention heatmaps).

pub mod ckpt;
pub mod datasets;
pub mod defenses;
pub mod engine;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod rng;
pub mod sparsity;
pub mod triggers;

pub use error::{Error, Result};
