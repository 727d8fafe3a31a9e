//! Minimal dense NN engine: layer graph, kernels, losses, optimizers.
//!
//! Everything runs in f64 on the CPU and is deterministic for a fixed seed
//! and input, which the training pipelines rely on for exact replay.

pub mod graph;
pub mod loss;
pub mod ops;
pub mod optim;

pub use graph::{
    backward, commit_bn_stats, commit_bn_stats_cumulative, forward, Act, BackwardResult,
    ForwardOpts, ForwardTrace, Network, NetworkBuilder, Op, ParamDef, ParamKind, TensorMap,
};
