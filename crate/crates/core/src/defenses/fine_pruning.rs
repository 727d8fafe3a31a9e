//! Fine-pruning sweep: rank the last convolution layer's output channels by
//! mean activation over clean data (ascending) and zero them cumulatively,
//! recording clean accuracy and attack success at each step.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledImageSet, TargetMode};
use crate::error::{Error, Result};
use crate::models::{apply_mask, ModelSpec, ModelWeights};
use crate::nn::{self, loss::argmax_rows, TensorMap};
use crate::sparsity::PruneMask;
use crate::triggers::{apply_trigger, TriggerBank};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinePruningPoint {
    pub pruned_fraction: f64,
    pub pruned_channels: usize,
    pub clean_acc: f64,
    pub asr: f64,
}

fn eval_with_channel_mask(
    spec: &ModelSpec,
    effective: &TensorMap,
    node: usize,
    channel_mask: &Array1<f64>,
    images: &ndarray::Array4<f64>,
    expected: &[usize],
) -> Result<f64> {
    let net = spec.network();
    let n = images.dim().0;
    let mut hits = 0usize;
    let mut at = 0usize;
    let chunk = 256;
    while at < n {
        let hi = (at + chunk).min(n);
        let xb = images.slice(ndarray::s![at..hi, .., .., ..]).to_owned();
        let opts = nn::ForwardOpts {
            training: false,
            channel_mask: Some((node, channel_mask.clone())),
        };
        let trace = nn::forward(&net, effective, &xb, &opts)?;
        let preds = argmax_rows(&trace.logits().view());
        hits += preds
            .iter()
            .zip(&expected[at..hi])
            .filter(|(p, e)| p == e)
            .count();
        at = hi;
    }
    Ok(hits as f64 / n as f64)
}

/// Sweep channel pruning of the last convolution layer. `step_fraction`
/// controls the sweep granularity (default 0.05 = one point per 5% of
/// channels, plus the 0% and 100% endpoints).
#[allow(clippy::too_many_arguments)]
pub fn fine_pruning_curve(
    spec: &ModelSpec,
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    clean_subset: &LabeledImageSet,
    testset: &LabeledImageSet,
    bank: &TriggerBank,
    mode: TargetMode,
    step_fraction: f64,
) -> Result<Vec<FinePruningPoint>> {
    let net = spec.network();
    let node = net
        .last_conv_node()
        .ok_or_else(|| Error::InvalidConfig("model has no convolution layers".into()))?;
    let effective = match mask {
        Some(m) => apply_mask(&weights.tensors, m),
        None => weights.tensors.clone(),
    };

    // Mean activation per output channel of the last conv over the clean set.
    let trace = nn::forward(&net, &effective, &clean_subset.images, &nn::ForwardOpts::default())?;
    let acts = trace.acts[node].image();
    let (_, c, _, _) = acts.dim();
    let mut means: Vec<(usize, f64)> = (0..c)
        .map(|ci| {
            let slice = acts.slice(ndarray::s![.., ci, .., ..]);
            (ci, slice.sum() / slice.len() as f64)
        })
        .collect();
    // Ascending: least-activated channels are pruned first.
    means.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let order: Vec<usize> = means.into_iter().map(|(i, _)| i).collect();

    let targets = crate::datasets::make_targets(&testset.labels, mode, testset.num_classes)?;
    let poisoned = apply_trigger(&testset.images, bank, &targets.targets)?;

    let mut points = Vec::new();
    let steps = (1.0 / step_fraction).round() as usize;
    for s in 0..=steps {
        let frac = (s as f64 * step_fraction).min(1.0);
        let pruned = ((frac * c as f64).round() as usize).min(c);
        let mut channel_mask = Array1::<f64>::ones(c);
        for &ci in order.iter().take(pruned) {
            channel_mask[ci] = 0.0;
        }
        let clean_acc = eval_with_channel_mask(
            spec,
            &effective,
            node,
            &channel_mask,
            &testset.images,
            &testset.labels,
        )?;
        let asr = eval_with_channel_mask(
            spec,
            &effective,
            node,
            &channel_mask,
            &poisoned,
            &targets.targets,
        )?;
        points.push(FinePruningPoint {
            pruned_fraction: pruned as f64 / c as f64,
            pruned_channels: pruned,
            clean_acc,
            asr,
        });
    }
    Ok(points)
}
