//! Shared test fixtures and independent oracles.
//!
//! The loss oracle here evaluates J with forward passes only, so the
//! finite-difference checks stay independent of the backward implementation
//! they verify.

#![allow(dead_code)]

use indexmap::IndexMap;
use ndarray::{Array4, ArrayD};
use rand::Rng;
use ribac_core::datasets::TargetMode;
use ribac_core::nn::{self, graph::NetworkBuilder, loss, Network, ParamKind, TensorMap};
use ribac_core::rng::substream;
use ribac_core::sparsity::PruneMask;
use ribac_core::triggers::{apply_trigger, TriggerBank};

/// A ~260-parameter residual CNN exercising every op kind: conv, batch
/// norm, relu, residual add, max pool, global average pool, linear.
pub fn tiny_net() -> Network {
    let mut b = NetworkBuilder::new((2, 6, 6));
    let c0 = b.conv(0, "conv0", 2, 3, 3, 1, 1);
    let bn = b.bn(c0, "bn0", 3);
    let r0 = b.relu(bn);
    let c1 = b.conv(r0, "conv1", 3, 3, 3, 1, 1);
    let res = b.add(c1, c0);
    let r1 = b.relu(res);
    let mp = b.maxpool(r1, 2, 2);
    let c2 = b.conv(mp, "conv2", 3, 4, 3, 1, 1);
    let r2 = b.relu(c2);
    let g = b.gap(r2);
    b.linear(g, "fc", 4, 3);
    b.finish()
}

/// Random weights for an arbitrary network, with batch-norm statistics
/// perturbed away from their defaults so inference mode is non-trivial.
pub fn random_weights(net: &Network, seed: u64) -> TensorMap {
    let mut rng = substream(seed, "test.weights");
    let mut out: TensorMap = IndexMap::new();
    for def in &net.params {
        let n: usize = def.shape.iter().product();
        let t = match def.kind {
            ParamKind::PrunableWeight => ArrayD::from_shape_vec(
                def.shape.clone(),
                (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
            .unwrap(),
            ParamKind::Bias | ParamKind::BnBeta => ArrayD::from_shape_vec(
                def.shape.clone(),
                (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            )
            .unwrap(),
            ParamKind::BnGamma => ArrayD::from_shape_vec(
                def.shape.clone(),
                (0..n).map(|_| rng.gen_range(0.8..1.2)).collect(),
            )
            .unwrap(),
            ParamKind::BnRunningMean => ArrayD::from_shape_vec(
                def.shape.clone(),
                (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            )
            .unwrap(),
            ParamKind::BnRunningVar => ArrayD::from_shape_vec(
                def.shape.clone(),
                (0..n).map(|_| rng.gen_range(0.5..1.5)).collect(),
            )
            .unwrap(),
        };
        out.insert(def.name.clone(), t);
    }
    out
}

/// Inputs kept away from the clip boundaries so the loss stays smooth at
/// the finite-difference scale.
pub fn smooth_batch(net: &Network, n: usize, seed: u64) -> Array4<f64> {
    let (c, h, w) = net.input_shape;
    let mut rng = substream(seed, "test.batch");
    Array4::from_shape_fn((n, c, h, w), |_| rng.gen_range(0.25..0.75))
}

/// Forward-only oracle for J = CE(f(x), y) + beta * CE(f(clip(x+tau)), t)
/// on effective weights (call with pre-masked weights when checking masked
/// paths).
#[allow(clippy::too_many_arguments)]
pub fn loss_oracle(
    net: &Network,
    effective: &TensorMap,
    x: &Array4<f64>,
    y: &[usize],
    bank: &TriggerBank,
    targets: &[usize],
    beta: f64,
    training_bn: bool,
) -> f64 {
    let opts = nn::ForwardOpts { training: training_bn, channel_mask: None };
    let clean = nn::forward(net, effective, x, &opts).unwrap();
    let (ce_c, _) = loss::softmax_cross_entropy(&clean.logits().view(), y);
    let poisoned = apply_trigger(x, bank, targets).unwrap();
    let troj = nn::forward(net, effective, &poisoned, &opts).unwrap();
    let (ce_t, _) = loss::softmax_cross_entropy(&troj.logits().view(), targets);
    ce_c + beta * ce_t
}

/// Standalone softmax cross-entropy oracle (mean over rows), written
/// directly from the definition.
pub fn softmax_ce_oracle(logits: &ndarray::Array2<f64>, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_z = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_z - row[t];
    }
    total / targets.len() as f64
}

/// Relative error with a small floor so near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-6)
}

pub const FD_H: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

/// Smallest distance of any piecewise-linear unit from its kink over one
/// forward pass: |relu input| and maxpool top-2 gap per window. Finite
/// differences are only trustworthy when this margin is well above the
/// perturbation size.
pub fn kink_margin(net: &Network, effective: &TensorMap, x: &Array4<f64>, training_bn: bool) -> f64 {
    let opts = nn::ForwardOpts { training: training_bn, channel_mask: None };
    let trace = nn::forward(net, effective, x, &opts).unwrap();
    let mut margin = f64::INFINITY;
    for op in &net.nodes {
        match op {
            nn::Op::Relu { input } => {
                let m = match &trace.acts[*input] {
                    nn::Act::Image(a) => a.iter().fold(f64::INFINITY, |acc, &v| acc.min(v.abs())),
                    nn::Act::Flat(a) => a.iter().fold(f64::INFINITY, |acc, &v| acc.min(v.abs())),
                };
                margin = margin.min(m);
            }
            nn::Op::MaxPool { input, size, stride } => {
                let a = trace.acts[*input].image();
                let (n, c, h, w) = a.dim();
                let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
                for ni in 0..n {
                    for ci in 0..c {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let mut top1 = f64::NEG_INFINITY;
                                let mut top2 = f64::NEG_INFINITY;
                                for ki in 0..*size {
                                    for kj in 0..*size {
                                        let v = a[(ni, ci, oi * stride + ki, oj * stride + kj)];
                                        if v > top1 {
                                            top2 = top1;
                                            top1 = v;
                                        } else if v > top2 {
                                            top2 = v;
                                        }
                                    }
                                }
                                margin = margin.min(top1 - top2);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// Central finite difference of `f` under perturbation of one tensor entry.
pub fn central_diff<F: FnMut(&TensorMap) -> f64>(
    weights: &TensorMap,
    name: &str,
    idx: usize,
    mut f: F,
) -> f64 {
    let mut plus = weights.clone();
    plus[name].as_slice_mut().unwrap()[idx] += FD_H;
    let jp = f(&plus);
    let mut minus = weights.clone();
    minus[name].as_slice_mut().unwrap()[idx] -= FD_H;
    let jm = f(&minus);
    (jp - jm) / (2.0 * FD_H)
}

/// All-to-one trigger bank with a budget wide enough for solid FD signal
/// while staying clear of the clip boundaries for `smooth_batch` inputs.
pub fn test_bank(net: &Network, epsilon: f64, seed: u64) -> TriggerBank {
    let (c, h, w) = net.input_shape;
    let mut rng = substream(seed, "test.bank");
    let mut patterns = IndexMap::new();
    patterns.insert(
        0usize,
        ndarray::Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-epsilon..epsilon)),
    );
    TriggerBank { epsilon, mode: TargetMode::AllToOne, patterns }
}

/// Random binary mask over the net's prunable tensors at the given keep
/// fraction, built from random scores.
pub fn random_mask(net: &Network, keep: f64, seed: u64) -> PruneMask {
    let weights = random_weights(net, seed.wrapping_add(99));
    let prunable = net.prunable_names();
    let scores = ribac_core::sparsity::score_init(&weights, &prunable);
    ribac_core::sparsity::generate_mask(&scores, keep).unwrap()
}
