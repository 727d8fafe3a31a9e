//! Input-superimposition entropy analysis: blend each probe with random
//! benign images and record the prediction-entropy distribution. Backdoored
//! inputs whose trigger survives blending produce low entropy; an additive
//! trigger inside a tight L∞ budget is destroyed by the blend instead.

use ndarray::{Array1, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_targets, LabeledImageSet};
use crate::error::{Error, Result};
use crate::models::{apply_mask, ModelSpec, ModelWeights};
use crate::nn::{self, loss};
use crate::rng::substream;
use crate::sparsity::PruneMask;
use crate::triggers::{apply_trigger, TriggerBank};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StripConfig {
    pub n_overlays: usize,
    pub seed: u64,
}

impl Default for StripConfig {
    fn default() -> Self {
        StripConfig { n_overlays: 100, seed: 0 }
    }
}

/// Per-probe mean prediction entropy (nats) under random 0.5/0.5 benign
/// superimposition. If `bank` is given, probes are trigger-stamped first.
#[allow(clippy::too_many_arguments)]
pub fn strip_entropy(
    spec: &ModelSpec,
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    probe_set: &LabeledImageSet,
    overlay_set: &LabeledImageSet,
    bank: Option<&TriggerBank>,
    cfg: &StripConfig,
) -> Result<Vec<f64>> {
    if overlay_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.n_overlays == 0 {
        return Err(Error::InvalidConfig("n_overlays must be >= 1".into()));
    }

    let probes = match bank {
        Some(bank) => {
            let t = make_targets(&probe_set.labels, bank.mode, probe_set.num_classes)?;
            apply_trigger(&probe_set.images, bank, &t.targets)?
        }
        None => probe_set.images.clone(),
    };

    let net = spec.network();
    let effective = match mask {
        Some(m) => apply_mask(&weights.tensors, m),
        None => weights.tensors.clone(),
    };

    let mut rng = substream(cfg.seed, "defense.strip");
    let (_, c, h, w) = probes.dim();
    let mut out = Vec::with_capacity(probes.dim().0);
    for pi in 0..probes.dim().0 {
        let probe = probes.index_axis(Axis(0), pi);
        let mut blended = Array4::<f64>::zeros((cfg.n_overlays, c, h, w));
        for oi in 0..cfg.n_overlays {
            let bi = rng.gen_range(0..overlay_set.len());
            let overlay = overlay_set.images.index_axis(Axis(0), bi);
            let mut slot = blended.index_axis_mut(Axis(0), oi);
            slot.assign(&probe);
            slot += &overlay;
            slot.mapv_inplace(|v| (v * 0.5).clamp(0.0, 1.0));
        }
        let trace = nn::forward(&net, &effective, &blended, &nn::ForwardOpts::default())?;
        let probs = loss::softmax(&trace.logits().view());
        let mean_entropy = probs
            .rows()
            .into_iter()
            .map(|r| loss::entropy(&Array1::from_iter(r.iter().copied())))
            .sum::<f64>()
            / cfg.n_overlays as f64;
        out.push(mean_entropy);
    }
    Ok(out)
}
