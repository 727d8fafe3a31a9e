//! Constraint property suite: mask cardinality and sort-oracle equivalence,
//! projection idempotence, trigger budget under simulated training updates,
//! and pixel-range preservation.

mod common;

use indexmap::IndexMap;
use ndarray::{Array3, Array4, ArrayD};
use proptest::prelude::*;
use ribac_core::datasets::TargetMode;
use ribac_core::nn::TensorMap;
use ribac_core::sparsity::{compression_ratio, generate_mask, kept_count, ste_score_grad, ImportanceScores};
use ribac_core::triggers::{apply_trigger, TriggerBank};

fn scores_from(layers: &[Vec<f64>]) -> ImportanceScores {
    let mut tensors: TensorMap = IndexMap::new();
    for (li, vals) in layers.iter().enumerate() {
        tensors.insert(
            format!("layer{li}"),
            ArrayD::from_shape_vec(vec![vals.len()], vals.clone()).unwrap(),
        );
    }
    ImportanceScores { tensors }
}

/// Sort oracle: order by (score desc, flat index asc), keep the first
/// round-half-even(k*n) (at least one).
fn sort_oracle(vals: &[f64], k: f64) -> Vec<f64> {
    let keep = kept_count(vals.len(), k);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
    let mut out = vec![0.0; vals.len()];
    for &i in order.iter().take(keep) {
        out[i] = 1.0;
    }
    out
}

fn layers_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-100.0f64..100.0, 1..60),
        1..4,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mask_cardinality_is_exact_and_matches_sort_oracle(
        layers in layers_strategy(),
        k in 0.01f64..1.0,
    ) {
        let scores = scores_from(&layers);
        let mask = generate_mask(&scores, k).unwrap();
        for (li, vals) in layers.iter().enumerate() {
            let m: Vec<f64> = mask.tensors[&format!("layer{li}")].iter().copied().collect();
            let ones = m.iter().filter(|&&v| v == 1.0).count();
            prop_assert_eq!(ones, kept_count(vals.len(), k));
            prop_assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(m, sort_oracle(vals, k));
        }
    }

    #[test]
    fn compression_ratio_within_rounding_of_reciprocal(
        layers in layers_strategy(),
        k in 0.02f64..1.0,
    ) {
        let scores = scores_from(&layers);
        let mask = generate_mask(&scores, k).unwrap();
        let ratio = compression_ratio(&mask).unwrap();
        let total: usize = layers.iter().map(Vec::len).sum();
        // Per-layer rounding window: each layer keeps within 0.5 of k*n,
        // floored at one weight.
        let min_ones: f64 = layers
            .iter()
            .map(|l| (k * l.len() as f64 - 0.5).max(1.0))
            .sum();
        let max_ones: f64 = layers
            .iter()
            .map(|l| (k * l.len() as f64 + 0.5).max(1.0))
            .sum();
        prop_assert!(ratio >= total as f64 / max_ones - 1e-12);
        prop_assert!(ratio <= total as f64 / min_ones + 1e-12);
    }

    #[test]
    fn projection_is_idempotent_and_feasible(
        vals in prop::collection::vec(-0.5f64..0.5, 12),
        epsilon in 0.001f64..0.1,
    ) {
        let mut patterns = IndexMap::new();
        patterns.insert(0usize, Array3::from_shape_vec((3, 2, 2), vals).unwrap());
        let mut bank = TriggerBank { epsilon, mode: TargetMode::AllToOne, patterns };
        bank.project();
        prop_assert!(bank.max_abs() <= epsilon);
        let snapshot = bank.patterns[&0].clone();
        bank.project();
        prop_assert_eq!(&bank.patterns[&0], &snapshot);
    }

    #[test]
    fn budget_holds_after_every_simulated_update(
        steps in prop::collection::vec(prop::collection::vec(-0.1f64..0.1, 12), 1..20),
        epsilon in 0.005f64..0.05,
    ) {
        let mut patterns = IndexMap::new();
        patterns.insert(0usize, Array3::zeros((3, 2, 2)));
        let mut bank = TriggerBank { epsilon, mode: TargetMode::AllToOne, patterns };
        for step in &steps {
            {
                let p = bank.patterns.get_mut(&0).unwrap();
                for (slot, delta) in p.iter_mut().zip(step) {
                    *slot += delta;
                }
            }
            bank.project();
            prop_assert!(bank.max_abs() <= epsilon);
        }
    }

    #[test]
    fn poisoned_pixels_stay_in_unit_range(
        pixels in prop::collection::vec(0.0f64..=1.0, 12),
        tau in prop::collection::vec(-0.05f64..0.05, 12),
    ) {
        let x = Array4::from_shape_vec((1, 3, 2, 2), pixels).unwrap();
        let mut patterns = IndexMap::new();
        patterns.insert(0usize, Array3::from_shape_vec((3, 2, 2), tau).unwrap());
        let bank = TriggerBank { epsilon: 0.05, mode: TargetMode::AllToOne, patterns };
        let out = apply_trigger(&x, &bank, &[0]).unwrap();
        prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // And stays within the budget of the clean image.
        for (a, b) in out.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 0.05 + 1e-15);
        }
    }

    #[test]
    fn ste_grad_is_linear_in_upstream(
        w in prop::collection::vec(-2.0f64..2.0, 8),
        g in prop::collection::vec(-2.0f64..2.0, 8),
        alpha in -3.0f64..3.0,
    ) {
        let mut weights: TensorMap = IndexMap::new();
        weights.insert("a".into(), ArrayD::from_shape_vec(vec![8], w).unwrap());
        let scores = ribac_core::sparsity::score_init(&weights, &["a".to_string()]);
        let mask = generate_mask(&scores, 0.5).unwrap();
        let mut up: TensorMap = IndexMap::new();
        up.insert("a".into(), ArrayD::from_shape_vec(vec![8], g.clone()).unwrap());
        let base = ste_score_grad(&weights, &mask, &up).unwrap();
        let mut up_scaled: TensorMap = IndexMap::new();
        up_scaled.insert(
            "a".into(),
            ArrayD::from_shape_vec(vec![8], g.iter().map(|v| v * alpha).collect()).unwrap(),
        );
        let scaled = ste_score_grad(&weights, &mask, &up_scaled).unwrap();
        for (b, s) in base["a"].iter().zip(scaled["a"].iter()) {
            prop_assert!((b * alpha - s).abs() <= 1e-12 * (1.0 + b.abs() * alpha.abs()));
        }
    }

    #[test]
    fn epoch_permutation_covers_everything_once(
        n in 1usize..300,
        seed in 0u64..1000,
        epoch in 0usize..5,
    ) {
        let perm = ribac_core::datasets::epoch_permutation(n, seed, epoch);
        let mut seen = vec![false; n];
        for &i in &perm {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
    }
}
