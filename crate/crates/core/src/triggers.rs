//! Per-target trigger patterns under an L∞ budget.

use indexmap::IndexMap;
use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use crate::datasets::TargetMode;
use crate::error::{Error, Result};
use crate::rng::substream;

pub const DEFAULT_EPSILON: f64 = 4.0 / 255.0;

/// One additive, image-shaped perturbation per attack target class.
/// Every pattern entry stays within [-epsilon, epsilon] after projection.
#[derive(Debug, Clone)]
pub struct TriggerBank {
    pub epsilon: f64,
    pub mode: TargetMode,
    /// target class -> (C, H, W) pattern
    pub patterns: IndexMap<usize, Array3<f64>>,
}

impl TriggerBank {
    pub fn pattern(&self, target: usize) -> Result<&Array3<f64>> {
        self.patterns.get(&target).ok_or(Error::MissingTrigger(target))
    }

    /// Largest |entry| across all patterns.
    pub fn max_abs(&self) -> f64 {
        self.patterns
            .values()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    }

    /// Clamp every pattern entry to [-epsilon, epsilon]. Idempotent.
    pub fn project(&mut self) {
        let eps = self.epsilon;
        for p in self.patterns.values_mut() {
            p.mapv_inplace(|v| v.clamp(-eps, eps));
        }
    }
}

/// Uniformly random patterns on [-epsilon, epsilon]; one pattern (class 0)
/// in all-to-one mode, one per class in all-to-all mode.
pub fn init_triggers(
    image_shape: (usize, usize, usize),
    mode: TargetMode,
    num_classes: usize,
    epsilon: f64,
    seed: u64,
) -> Result<TriggerBank> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} must be > 0")));
    }
    let (c, h, w) = image_shape;
    let classes: Vec<usize> = match mode {
        TargetMode::AllToOne => vec![0],
        TargetMode::AllToAll => (0..num_classes).collect(),
    };
    let mut rng = substream(seed, "triggers");
    let mut patterns = IndexMap::new();
    for class in classes {
        let p = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-epsilon..=epsilon));
        patterns.insert(class, p);
    }
    Ok(TriggerBank { epsilon, mode, patterns })
}

/// Poison a batch: out_i = clip01(x_i + pattern(target_i)).
pub fn apply_trigger(x: &Array4<f64>, bank: &TriggerBank, targets: &[usize]) -> Result<Array4<f64>> {
    if x.dim().0 != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples vs {} targets",
            x.dim().0,
            targets.len()
        )));
    }
    let mut out = x.clone();
    for (i, &t) in targets.iter().enumerate() {
        let pattern = bank.pattern(t)?;
        let mut xi = out.index_axis_mut(Axis(0), i);
        xi += pattern;
        xi.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Fold the gradient at the poisoned inputs back onto the trigger patterns.
///
/// The clip derivative is the indicator of 0 < x + tau < 1, so saturated
/// pixels contribute nothing. Returns one gradient per pattern present in
/// the bank (zero if no sample used it).
pub fn trigger_grad(
    x: &Array4<f64>,
    bank: &TriggerBank,
    targets: &[usize],
    poisoned_input_grad: &Array4<f64>,
) -> Result<IndexMap<usize, Array3<f64>>> {
    let (_, c, h, w) = x.dim();
    let mut grads: IndexMap<usize, Array3<f64>> = IndexMap::new();
    for &class in bank.patterns.keys() {
        grads.insert(class, Array3::zeros((c, h, w)));
    }
    for (i, &t) in targets.iter().enumerate() {
        let pattern = bank.pattern(t)?;
        let g = grads.get_mut(&t).unwrap();
        let xi = x.index_axis(Axis(0), i);
        let di = poisoned_input_grad.index_axis(Axis(0), i);
        ndarray::Zip::from(g)
            .and(&xi)
            .and(&di)
            .and(pattern)
            .for_each(|g, &x, &d, &p| {
                let z = x + p;
                if z > 0.0 && z < 1.0 {
                    *g += d;
                }
            });
    }
    Ok(grads)
}

/// Amplified visualization clip01(0.5 + amplify * tau) as an 8-bit RGB image.
pub fn render_amplified(pattern: &Array3<f64>, amplify: f64) -> image::RgbImage {
    let (c, h, w) = pattern.dim();
    assert_eq!(c, 3, "rgb pattern expected");
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px: Vec<u8> = (0..3)
                .map(|ch| ((0.5 + amplify * pattern[(ch, i, j)]).clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            img.put_pixel(j as u32, i as u32, image::Rgb([px[0], px[1], px[2]]));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(mode: TargetMode, classes: usize, eps: f64) -> TriggerBank {
        init_triggers((3, 8, 8), mode, classes, eps, 11).unwrap()
    }

    #[test]
    fn all_to_one_holds_one_pattern() {
        let b = bank(TargetMode::AllToOne, 10, DEFAULT_EPSILON);
        assert_eq!(b.patterns.len(), 1);
        assert!(b.patterns.contains_key(&0));
    }

    #[test]
    fn all_to_all_holds_one_pattern_per_class() {
        let b = bank(TargetMode::AllToAll, 10, DEFAULT_EPSILON);
        assert_eq!(b.patterns.len(), 10);
    }

    #[test]
    fn init_respects_the_budget() {
        let b = bank(TargetMode::AllToAll, 5, DEFAULT_EPSILON);
        assert!(b.max_abs() <= DEFAULT_EPSILON);
    }

    #[test]
    fn zero_trigger_is_the_identity() {
        let mut b = bank(TargetMode::AllToOne, 3, 0.1);
        b.patterns[&0].fill(0.0);
        let x = Array4::from_elem((2, 3, 8, 8), 0.4);
        let out = apply_trigger(&x, &b, &[0, 0]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn clipping_caps_saturated_pixels() {
        let mut b = bank(TargetMode::AllToOne, 3, DEFAULT_EPSILON);
        b.patterns[&0].fill(DEFAULT_EPSILON);
        let x = Array4::from_elem((1, 3, 8, 8), 1.0);
        let out = apply_trigger(&x, &b, &[0]).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn poisoned_stays_within_budget_of_clean() {
        let b = bank(TargetMode::AllToOne, 3, DEFAULT_EPSILON);
        let x = Array4::from_shape_fn((4, 3, 8, 8), |(n, c, i, j)| {
            ((n + c + i + j) % 10) as f64 / 10.0
        });
        let out = apply_trigger(&x, &b, &[0, 0, 0, 0]).unwrap();
        let max_diff = ndarray::Zip::from(&out)
            .and(&x)
            .fold(0.0f64, |acc, &a, &b| acc.max((a - b).abs()));
        assert!(max_diff <= DEFAULT_EPSILON + 1e-15);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let mut b = bank(TargetMode::AllToOne, 3, DEFAULT_EPSILON);
        b.patterns[&0][(0, 0, 0)] = 0.1;
        b.project();
        assert!((b.patterns[&0][(0, 0, 0)] - DEFAULT_EPSILON).abs() < 1e-15);
        let snapshot = b.patterns[&0].clone();
        b.project();
        assert_eq!(b.patterns[&0], snapshot);
    }

    #[test]
    fn missing_pattern_is_reported() {
        let b = bank(TargetMode::AllToOne, 3, DEFAULT_EPSILON);
        let x = Array4::zeros((1, 3, 8, 8));
        assert!(matches!(apply_trigger(&x, &b, &[2]), Err(Error::MissingTrigger(2))));
    }

    #[test]
    fn grad_masks_out_saturated_pixels() {
        let mut b = bank(TargetMode::AllToOne, 3, 0.5);
        b.patterns[&0].fill(0.5);
        let mut x = Array4::from_elem((1, 3, 8, 8), 0.2);
        x[(0, 0, 0, 0)] = 0.9; // saturates after +0.5
        let d = Array4::from_elem((1, 3, 8, 8), 1.0);
        let g = trigger_grad(&x, &b, &[0], &d).unwrap();
        assert_eq!(g[&0][(0, 0, 0)], 0.0);
        assert_eq!(g[&0][(0, 0, 1)], 1.0);
    }
}
