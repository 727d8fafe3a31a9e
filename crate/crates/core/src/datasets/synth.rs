//! Synthetic blob-classification set for CI-scale experiments.
//!
//! Three classes distinguished only by blob position, rendered over a random
//! gray background with heavy pixel noise. Each sample also contains one
//! distractor blob at a random position, so the classifier has to localize
//! the canonical positions rather than detect mere presence. The whole set is
//! a pure function of a fixed internal seed.

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledImageSet, Split};
use crate::rng::substream;

pub const DESK_TRAIN_SIZE: usize = 2048;
pub const DESK_TEST_SIZE: usize = 1024;
pub const DESK_NUM_CLASSES: usize = 3;
const SIDE: usize = 32;
const SEED: u64 = 0xD3_5C_17;

/// Canonical blob centers per class.
const CENTERS: [(f64, f64); DESK_NUM_CLASSES] = [(9.0, 9.0), (9.0, 23.0), (23.0, 16.0)];
const CHANNEL_GAIN: [f64; 3] = [0.9, 1.0, 1.1];
const NOISE_SIGMA: f64 = 0.06;

pub fn generate(split: Split) -> LabeledImageSet {
    let (n, tag) = match split {
        Split::Train => (DESK_TRAIN_SIZE, "train"),
        Split::Test => (DESK_TEST_SIZE, "test"),
    };
    let mut rng = substream(SEED, &format!("desk_synth.{tag}"));
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();

    let mut images = Array4::<f64>::zeros((n, 3, SIDE, SIDE));
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let class = rng.gen_range(0..DESK_NUM_CLASSES);
        labels.push(class);

        let background: f64 = rng.gen_range(0.35..0.60);
        let (cy, cx) = CENTERS[class];
        let jy = rng.gen_range(-3.0..3.0);
        let jx = rng.gen_range(-3.0..3.0);
        let sigma: f64 = rng.gen_range(2.6..4.0);
        let amp: f64 = rng.gen_range(0.20..0.38);

        // Distractor: same appearance, uniform random center.
        let dy = rng.gen_range(4.0..(SIDE as f64 - 4.0));
        let dx = rng.gen_range(4.0..(SIDE as f64 - 4.0));
        let damp: f64 = rng.gen_range(0.10..0.22);
        let dsigma: f64 = rng.gen_range(2.6..4.0);

        for i in 0..SIDE {
            for j in 0..SIDE {
                let r2 = (i as f64 - cy - jy).powi(2) + (j as f64 - cx - jx).powi(2);
                let blob = amp * (-r2 / (2.0 * sigma * sigma)).exp();
                let d2 = (i as f64 - dy).powi(2) + (j as f64 - dx).powi(2);
                let distract = damp * (-d2 / (2.0 * dsigma * dsigma)).exp();
                for ch in 0..3 {
                    let v = background
                        + CHANNEL_GAIN[ch] * (blob + distract)
                        + noise.sample(&mut rng);
                    images[(s, ch, i, j)] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    LabeledImageSet { images, labels, num_classes: DESK_NUM_CLASSES, split }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_classes_are_fixed() {
        let train = generate(Split::Train);
        assert_eq!(train.len(), DESK_TRAIN_SIZE);
        assert_eq!(train.num_classes, 3);
        assert_eq!(train.images.dim(), (DESK_TRAIN_SIZE, 3, 32, 32));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(Split::Test);
        let b = generate(Split::Test);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let set = generate(Split::Test);
        set.validate().unwrap();
    }

    #[test]
    fn splits_differ() {
        let train = generate(Split::Train);
        let test = generate(Split::Test);
        assert_ne!(
            train.images.index_axis(ndarray::Axis(0), 0),
            test.images.index_axis(ndarray::Axis(0), 0)
        );
    }
}
