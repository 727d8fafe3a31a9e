//! Classifier architectures, weight initialization, masked forward passes,
//! and clean pretraining.

use indexmap::IndexMap;
use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{batch_iter, LabeledImageSet};
use crate::error::{Error, Result};
use crate::nn::{self, loss, optim, Network, ParamKind, TensorMap};
use crate::rng::substream;
use crate::sparsity::PruneMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    PreactResnet18,
    Resnet18,
    DeskCnn,
}

impl Arch {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "preact_resnet18" => Ok(Arch::PreactResnet18),
            "resnet18" => Ok(Arch::Resnet18),
            "desk_cnn" => Ok(Arch::DeskCnn),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::PreactResnet18 => "preact_resnet18",
            Arch::Resnet18 => "resnet18",
            Arch::DeskCnn => "desk_cnn",
        }
    }
}

/// Architecture + class count + input geometry. Fully determines the layer
/// graph and the ordered prunable-tensor registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_classes: usize,
    /// (H, W, C)
    pub input_shape: (usize, usize, usize),
}

impl ModelSpec {
    pub fn new(arch: Arch, num_classes: usize, input_shape: (usize, usize, usize)) -> Self {
        ModelSpec { arch, num_classes, input_shape }
    }

    /// Build the layer graph. Node and parameter order is a pure function of
    /// the spec, so the prunable registry is stable across runs.
    pub fn network(&self) -> Network {
        let (h, w, c) = self.input_shape;
        let mut b = Builder::new((c, h, w));
        match self.arch {
            Arch::DeskCnn => build_desk_cnn(&mut b, self.num_classes),
            Arch::PreactResnet18 => build_preact_resnet18(&mut b, self.num_classes),
            Arch::Resnet18 => build_resnet18(&mut b, self.num_classes),
        }
        b.finish()
    }

    pub fn prunable_names(&self) -> Vec<String> {
        self.network().prunable_names()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RandomInit,
    PretrainedClean,
    FinetunedBackdoor,
}

/// Named weight tensors of one model instance.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub tensors: TensorMap,
    pub provenance: Provenance,
}

impl ModelWeights {
    /// SHA-256 over every tensor's little-endian bytes, in registry order.
    /// Used to assert that frozen weights stay bit-identical.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            for v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// All values finite?
    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// W ⊙ M on prunable tensors; everything else is passed through unchanged.
pub fn apply_mask(weights: &TensorMap, mask: &PruneMask) -> TensorMap {
    let mut out = weights.clone();
    for (name, m) in &mask.tensors {
        let w = out
            .get_mut(name)
            .unwrap_or_else(|| panic!("mask names unknown tensor `{name}`"));
        *w *= m;
    }
    out
}

/// Deterministic random initialization for the given spec.
pub fn build_model(spec: &ModelSpec, seed: u64) -> ModelWeights {
    let net = spec.network();
    let mut rng = substream(seed, "init");
    let mut tensors: TensorMap = IndexMap::new();
    for def in &net.params {
        let n: usize = def.shape.iter().product();
        let t = match def.kind {
            ParamKind::PrunableWeight => {
                if def.shape.len() == 4 {
                    // Kaiming normal, fan-out mode.
                    let fan_out = def.shape[0] * def.shape[2] * def.shape[3];
                    let dist = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).unwrap();
                    ArrayD::from_shape_vec(
                        def.shape.clone(),
                        (0..n).map(|_| dist.sample(&mut rng)).collect(),
                    )
                    .unwrap()
                } else {
                    let fan_in = def.shape[1];
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    ArrayD::from_shape_vec(
                        def.shape.clone(),
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    )
                    .unwrap()
                }
            }
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => {
                ArrayD::zeros(def.shape.clone())
            }
            ParamKind::BnGamma | ParamKind::BnRunningVar => ArrayD::ones(def.shape.clone()),
        };
        tensors.insert(def.name.clone(), t);
    }
    ModelWeights { tensors, provenance: Provenance::RandomInit }
}

/// Inference-mode logits, optionally with a pruning mask applied to the
/// prunable weights.
pub fn forward(
    spec: &ModelSpec,
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    x: &Array4<f64>,
) -> Result<Array2<f64>> {
    let net = spec.network();
    let effective = match mask {
        Some(m) => apply_mask(&weights.tensors, m),
        None => weights.tensors.clone(),
    };
    let trace = nn::forward(&net, &effective, x, &nn::ForwardOpts::default())?;
    Ok(trace.logits().clone())
}

/// Forward over a whole set in fixed-size chunks; returns all logits.
pub fn forward_batched(
    spec: &ModelSpec,
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    images: &Array4<f64>,
    chunk: usize,
) -> Result<Array2<f64>> {
    let net = spec.network();
    let effective = match mask {
        Some(m) => apply_mask(&weights.tensors, m),
        None => weights.tensors.clone(),
    };
    let n = images.dim().0;
    let mut logits = Array2::<f64>::zeros((n, spec.num_classes));
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let xb = images.slice(ndarray::s![at..hi, .., .., ..]).to_owned();
        let trace = nn::forward(&net, &effective, &xb, &nn::ForwardOpts::default())?;
        logits.slice_mut(ndarray::s![at..hi, ..]).assign(trace.logits());
        at = hi;
    }
    Ok(logits)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random horizontal flip + random crop (pad 4). Off by default.
    pub augment: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

/// SGD-with-momentum clean training from random init; cosine learning rate.
pub fn pretrain_clean(
    spec: &ModelSpec,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &PretrainConfig,
) -> Result<(ModelWeights, Vec<PretrainEpoch>)> {
    let net = spec.network();
    let mut model = build_model(spec, cfg.seed);
    let mut opt = optim::SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        opt.lr = optim::cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch)? {
            let x = if cfg.augment {
                augment_batch(&batch.x, cfg.seed, epoch, batches)
            } else {
                batch.x
            };
            let trace = nn::forward(&net, &model.tensors, &x, &nn::ForwardOpts { training: true, channel_mask: None })?;
            let (ce, dlogits) = loss::softmax_cross_entropy(&trace.logits().view(), &batch.y);
            if !ce.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: format!("pretrain epoch {epoch}"),
                    clean: ce,
                    trojan: 0.0,
                });
            }
            let mut grads =
                nn::backward(&net, &model.tensors, &trace, &dlogits, true, None)?.param_grads;
            if cfg.weight_decay > 0.0 {
                for (name, g) in grads.iter_mut() {
                    let kind = net
                        .params
                        .iter()
                        .find(|p| &p.name == name)
                        .map(|p| p.kind)
                        .unwrap();
                    if kind == ParamKind::PrunableWeight {
                        *g += &(model.tensors[name].clone() * cfg.weight_decay);
                    }
                }
            }
            opt.step(&mut model.tensors, &grads);
            nn::commit_bn_stats(&mut model.tensors, &trace, 0.1);
            epoch_loss += ce;
            batches += 1;
        }
        let acc = crate::eval::clean_accuracy(spec, &model, None, test)?;
        history.push(PretrainEpoch {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            test_accuracy: acc,
        });
    }

    model.provenance = Provenance::PretrainedClean;
    Ok((model, history))
}

/// Random horizontal flip + random crop with 4px zero padding.
fn augment_batch(x: &Array4<f64>, seed: u64, epoch: usize, batch: usize) -> Array4<f64> {
    let mut rng = substream(seed, &format!("augment.{epoch}.{batch}"));
    let (n, c, h, w) = x.dim();
    let pad = 4usize;
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        let flip = rng.gen_bool(0.5);
        let oy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let ox = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let src_i = i as isize + oy;
                    let src_j = j as isize + ox;
                    if src_i < 0 || src_i >= h as isize || src_j < 0 || src_j >= w as isize {
                        continue;
                    }
                    let src_j = if flip { w - 1 - src_j as usize } else { src_j as usize };
                    out[(ni, ci, i, j)] = x[(ni, ci, src_i as usize, src_j)];
                }
            }
        }
    }
    out
}

// --- graph builders ---------------------------------------------------------

type Builder = crate::nn::graph::NetworkBuilder;

fn build_desk_cnn(b: &mut Builder, num_classes: usize) {
    let chans = [16usize, 24, 32, 48];
    let mut x = 0; // input node
    let mut in_c = 3;
    for (i, &out_c) in chans.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        x = b.conv(x, &name, in_c, out_c, 3, 1, 1);
        x = b.bn(x, &format!("bn{}", i + 1), out_c);
        x = b.relu(x);
        if i < 2 {
            x = b.maxpool(x, 2, 2);
        }
        in_c = out_c;
    }
    let x = b.gap(x);
    b.linear(x, "fc", chans[3], num_classes);
}

fn preact_block(b: &mut Builder, x: usize, name: &str, in_c: usize, out_c: usize, stride: usize) -> usize {
    let bn1 = b.bn(x, &format!("{name}.bn1"), in_c);
    let act1 = b.relu(bn1);
    let shortcut = if stride != 1 || in_c != out_c {
        b.conv(act1, &format!("{name}.shortcut"), in_c, out_c, 1, stride, 0)
    } else {
        x
    };
    let c1 = b.conv(act1, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1);
    let bn2 = b.bn(c1, &format!("{name}.bn2"), out_c);
    let act2 = b.relu(bn2);
    let c2 = b.conv(act2, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1);
    b.add(c2, shortcut)
}

fn build_preact_resnet18(b: &mut Builder, num_classes: usize) {
    let mut x = b.conv(0, "conv1", 3, 64, 3, 1, 1);
    let widths = [64usize, 128, 256, 512];
    let mut in_c = 64;
    for (stage, &out_c) in widths.iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            x = preact_block(b, x, &format!("layer{}.{block}", stage + 1), in_c, out_c, stride);
            in_c = out_c;
        }
    }
    x = b.bn(x, "bn_final", 512);
    x = b.relu(x);
    let x = b.gap(x);
    b.linear(x, "fc", 512, num_classes);
}

fn basic_block(b: &mut Builder, x: usize, name: &str, in_c: usize, out_c: usize, stride: usize) -> usize {
    let c1 = b.conv(x, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1);
    let bn1 = b.bn(c1, &format!("{name}.bn1"), out_c);
    let act1 = b.relu(bn1);
    let c2 = b.conv(act1, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1);
    let bn2 = b.bn(c2, &format!("{name}.bn2"), out_c);
    let shortcut = if stride != 1 || in_c != out_c {
        let sc = b.conv(x, &format!("{name}.shortcut"), in_c, out_c, 1, stride, 0);
        b.bn(sc, &format!("{name}.shortcut_bn"), out_c)
    } else {
        x
    };
    let sum = b.add(bn2, shortcut);
    b.relu(sum)
}

fn build_resnet18(b: &mut Builder, num_classes: usize) {
    let c1 = b.conv(0, "conv1", 3, 64, 3, 1, 1);
    let bn1 = b.bn(c1, "bn1", 64);
    let mut x = b.relu(bn1);
    let widths = [64usize, 128, 256, 512];
    let mut in_c = 64;
    for (stage, &out_c) in widths.iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            x = basic_block(b, x, &format!("layer{}.{block}", stage + 1), in_c, out_c, stride);
            in_c = out_c;
        }
    }
    let x = b.gap(x);
    b.linear(x, "fc", 512, num_classes);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{self, Split};

    fn desk_spec() -> ModelSpec {
        ModelSpec::new(Arch::DeskCnn, 3, (32, 32, 3))
    }

    #[test]
    fn desk_cnn_stays_under_200k_params() {
        let net = desk_spec().network();
        let n = net.param_count();
        assert!(n <= 200_000, "desk_cnn has {n} parameters");
        assert!(n > 10_000, "desk_cnn unexpectedly tiny: {n}");
    }

    #[test]
    fn same_seed_builds_bit_identical_models() {
        let spec = desk_spec();
        let a = build_model(&spec, 42);
        let b = build_model(&spec, 42);
        assert_eq!(a.checksum(), b.checksum());
        let c = build_model(&spec, 43);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn prunable_registry_is_stable_and_ordered() {
        let spec = desk_spec();
        let a = spec.prunable_names();
        let b = spec.prunable_names();
        assert_eq!(a, b);
        assert_eq!(a.first().map(String::as_str), Some("conv1.weight"));
        assert_eq!(a.last().map(String::as_str), Some("fc.weight"));
        assert_eq!(a.len(), 5); // 4 conv + 1 linear
    }

    #[test]
    fn all_ones_mask_is_the_identity() {
        let spec = desk_spec();
        let model = build_model(&spec, 7);
        let ones = crate::sparsity::PruneMask::all_ones(&spec);
        let x = datasets::load_dataset(datasets::DatasetId::DeskSynth, Split::Test, std::path::Path::new("."))
            .unwrap()
            .images
            .slice(ndarray::s![..4, .., .., ..])
            .to_owned();
        let dense = forward(&spec, &model, None, &x).unwrap();
        let masked = forward(&spec, &model, Some(&ones), &x).unwrap();
        assert_eq!(dense, masked);
    }

    #[test]
    fn all_zeros_mask_ignores_the_input() {
        let spec = desk_spec();
        let mut model = build_model(&spec, 7);
        // Zero every bias-like tensor so the only residue is norm constants.
        for (name, t) in model.tensors.iter_mut() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                t.fill(0.0);
            }
        }
        let zeros = crate::sparsity::PruneMask::all_zeros(&spec);
        let set = datasets::load_dataset(datasets::DatasetId::DeskSynth, Split::Test, std::path::Path::new(".")).unwrap();
        let x1 = set.images.slice(ndarray::s![0..1, .., .., ..]).to_owned();
        let x2 = set.images.slice(ndarray::s![1..2, .., .., ..]).to_owned();
        let l1 = forward(&spec, &model, Some(&zeros), &x1).unwrap();
        let l2 = forward(&spec, &model, Some(&zeros), &x2).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn forward_is_pure() {
        let spec = desk_spec();
        let model = build_model(&spec, 3);
        let set = datasets::load_dataset(datasets::DatasetId::DeskSynth, Split::Test, std::path::Path::new(".")).unwrap();
        let x = set.images.slice(ndarray::s![..2, .., .., ..]).to_owned();
        let a = forward(&spec, &model, None, &x).unwrap();
        let b = forward(&spec, &model, None, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn preact_resnet18_parameter_count() {
        let spec = ModelSpec::new(Arch::PreactResnet18, 10, (32, 32, 3));
        let n = spec.network().param_count();
        // Hand-derived from the layer list: conv1 1728 + stages (147968 +
        // 525184 + 2098944 + 8392192) + final bn 1024 + fc 5130.
        assert_eq!(n, 11_172_170);
        assert!((n as f64 - 11.2e6).abs() < 0.1e6);
    }

    #[test]
    fn resnet18_shapes_check_out() {
        let spec = ModelSpec::new(Arch::Resnet18, 200, (64, 64, 3));
        let model = build_model(&spec, 0);
        let x = Array4::<f64>::zeros((1, 3, 64, 64));
        let logits = forward(&spec, &model, None, &x).unwrap();
        assert_eq!(logits.dim(), (1, 200));
    }

    #[test]
    fn unknown_arch_is_rejected() {
        assert!(matches!(Arch::parse("vgg16"), Err(Error::UnknownArch(_))));
    }
}
