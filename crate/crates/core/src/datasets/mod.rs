//! Dataset ingestion, target-label generation, and batch iteration.

mod cifar10;
mod gtsrb;
mod imgutil;
mod synth;
mod tiny_imagenet;

use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

pub use synth::{DESK_NUM_CLASSES, DESK_TEST_SIZE, DESK_TRAIN_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Cifar10,
    Gtsrb,
    TinyImagenet,
    DeskSynth,
}

impl DatasetId {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cifar10" => Ok(DatasetId::Cifar10),
            "gtsrb" => Ok(DatasetId::Gtsrb),
            "tiny_imagenet" => Ok(DatasetId::TinyImagenet),
            "desk_synth" => Ok(DatasetId::DeskSynth),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Gtsrb => "gtsrb",
            DatasetId::TinyImagenet => "tiny_imagenet",
            DatasetId::DeskSynth => "desk_synth",
        }
    }

    /// (H, W, C) after ingestion.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self {
            DatasetId::Cifar10 | DatasetId::Gtsrb | DatasetId::DeskSynth => (32, 32, 3),
            DatasetId::TinyImagenet => (64, 64, 3),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetId::Cifar10 => 10,
            DatasetId::Gtsrb => 43,
            DatasetId::TinyImagenet => 200,
            DatasetId::DeskSynth => DESK_NUM_CLASSES,
        }
    }
}

/// Images in [0,1], stored channel-first (N, C, H, W), with integer labels.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Check the structural invariants; loaders call this before returning.
    pub fn validate(&self) -> Result<()> {
        if self.images.dim().0 != self.labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images vs {} labels",
                self.images.dim().0,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let (min, max) = self
            .images
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !self.images.is_empty() && (min < 0.0 || max > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "pixels outside [0,1]: min={min} max={max}"
            )));
        }
        Ok(())
    }

    /// Copy of the samples at `idx`, in order.
    pub fn gather(&self, idx: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut x = Array4::<f64>::zeros((idx.len(), c, h, w));
        let mut y = Vec::with_capacity(idx.len());
        for (bi, &si) in idx.iter().enumerate() {
            x.index_axis_mut(Axis(0), bi).assign(&self.images.index_axis(Axis(0), si));
            y.push(self.labels[si]);
        }
        (x, y)
    }

    /// First `n` samples as a new set (CI-scale subsetting).
    pub fn take(&self, n: usize) -> LabeledImageSet {
        let n = n.min(self.len());
        LabeledImageSet {
            images: self.images.slice(ndarray::s![..n, .., .., ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    AllToOne,
    AllToAll,
}

impl TargetMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetMode::AllToOne => "all2one",
            TargetMode::AllToAll => "all2all",
        }
    }
}

/// Attack targets aligned with a label vector.
#[derive(Debug, Clone)]
pub struct TargetAssignment {
    pub mode: TargetMode,
    pub targets: Vec<usize>,
}

/// Map ground-truth labels to attack targets: class 0 for all-to-one,
/// (y+1) mod c for all-to-all.
pub fn make_targets(labels: &[usize], mode: TargetMode, num_classes: usize) -> Result<TargetAssignment> {
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "target generation needs at least 2 classes, got {num_classes}"
        )));
    }
    let targets = match mode {
        TargetMode::AllToOne => vec![0; labels.len()],
        TargetMode::AllToAll => labels.iter().map(|&y| (y + 1) % num_classes).collect(),
    };
    Ok(TargetAssignment { mode, targets })
}

/// Seeded permutation of `0..n` for one epoch. Stateless in (seed, epoch).
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = substream(seed, &format!("data.epoch.{epoch}"));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

pub struct Batch {
    pub x: Array4<f64>,
    pub y: Vec<usize>,
    /// Positions of the batch samples in the source set.
    pub indices: Vec<usize>,
}

/// Iterate one epoch of seeded mini-batches. The same (seed, epoch) always
/// produces the identical batch sequence.
pub fn batch_iter<'a>(
    set: &'a LabeledImageSet,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let perm = epoch_permutation(set.len(), seed, epoch);
    let chunks: Vec<Vec<usize>> = perm.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(chunks.into_iter().map(move |indices| {
        let (x, y) = set.gather(&indices);
        Batch { x, y, indices }
    }))
}

/// Load one of the supported datasets, normalized to [0,1] pixels, in a
/// deterministic sample order.
pub fn load_dataset(name: DatasetId, split: Split, root: &Path) -> Result<LabeledImageSet> {
    let set = match name {
        DatasetId::Cifar10 => cifar10::load(root, split)?,
        DatasetId::Gtsrb => gtsrb::load(root, split)?,
        DatasetId::TinyImagenet => tiny_imagenet::load(root, split)?,
        DatasetId::DeskSynth => synth::generate(split),
    };
    set.validate()?;
    Ok(set)
}
