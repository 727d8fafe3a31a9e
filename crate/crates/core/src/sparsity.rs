//! Importance scores, top-k mask generation, the straight-through score
//! gradient, the global magnitude-pruning baseline, and compression
//! accounting.

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::nn::TensorMap;

/// Trainable per-weight scores, aligned with the prunable registry.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    pub tensors: TensorMap,
}

/// Binary keep/drop mask over the prunable weights. Values are exactly
/// 0.0 or 1.0 so the mask can be applied by elementwise product.
#[derive(Debug, Clone)]
pub struct PruneMask {
    pub tensors: TensorMap,
    pub keep_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreInit {
    /// |W|: step-0 masking coincides with layerwise magnitude pruning.
    Abs,
    /// Raw W, the literal score-initialization reading.
    Signed,
}

impl PruneMask {
    pub fn all_ones(spec: &ModelSpec) -> PruneMask {
        let net = spec.network();
        let mut tensors: TensorMap = IndexMap::new();
        for p in &net.params {
            if p.kind == crate::nn::ParamKind::PrunableWeight {
                tensors.insert(p.name.clone(), ArrayD::ones(p.shape.clone()));
            }
        }
        PruneMask { tensors, keep_fraction: 1.0 }
    }

    pub fn all_zeros(spec: &ModelSpec) -> PruneMask {
        let mut m = PruneMask::all_ones(spec);
        for t in m.tensors.values_mut() {
            t.fill(0.0);
        }
        m.keep_fraction = 0.0;
        m
    }

    pub fn total_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn ones(&self) -> usize {
        self.tensors
            .values()
            .map(|t| t.iter().filter(|&&v| v == 1.0).count())
            .sum()
    }

    /// Per-layer kept counts, in registry order.
    pub fn ones_per_layer(&self) -> Vec<(String, usize)> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.iter().filter(|&&v| v == 1.0).count()))
            .collect()
    }
}

/// Number of weights kept in a layer of `n` entries at keep fraction `k`:
/// round-half-to-even, but never zero.
pub fn kept_count(n: usize, k: f64) -> usize {
    (((n as f64) * k).round_ties_even() as usize).clamp(1, n)
}

fn check_keep_fraction(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::InvalidConfig(format!("keep fraction {k} outside (0, 1]")));
    }
    Ok(())
}

/// Mark the `keep` largest entries of `vals`; ties at the threshold resolve
/// to the lower flat index.
fn top_k_flags(vals: &[f64], keep: usize) -> Vec<bool> {
    let n = vals.len();
    debug_assert!(keep >= 1 && keep <= n);
    let mut sorted: Vec<f64> = vals.to_vec();
    let cut = n - keep;
    sorted.select_nth_unstable_by(cut, |a, b| a.partial_cmp(b).expect("finite scores"));
    let threshold = sorted[cut];

    let above = vals.iter().filter(|&&v| v > threshold).count();
    let mut at_threshold_budget = keep - above;
    let mut flags = vec![false; n];
    for (i, &v) in vals.iter().enumerate() {
        if v > threshold {
            flags[i] = true;
        } else if v == threshold && at_threshold_budget > 0 {
            flags[i] = true;
            at_threshold_budget -= 1;
        }
    }
    flags
}

/// Per-layer top-k mask from importance scores.
pub fn generate_mask(scores: &ImportanceScores, keep_fraction: f64) -> Result<PruneMask> {
    check_keep_fraction(keep_fraction)?;
    let mut tensors: TensorMap = IndexMap::new();
    for (name, s) in &scores.tensors {
        let flat: Vec<f64> = s.iter().copied().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite score in `{name}`")));
        }
        let keep = kept_count(flat.len(), keep_fraction);
        let flags = top_k_flags(&flat, keep);
        let mask = ArrayD::from_shape_vec(
            s.shape().to_vec(),
            flags.into_iter().map(|f| if f { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        tensors.insert(name.clone(), mask);
    }
    Ok(PruneMask { tensors, keep_fraction })
}

/// Score initialization from pretrained weights over the given prunable
/// registry.
pub fn score_init_with(weights: &TensorMap, prunable: &[String], mode: ScoreInit) -> ImportanceScores {
    let mut tensors: TensorMap = IndexMap::new();
    for name in prunable {
        let w = &weights[name];
        let s = match mode {
            ScoreInit::Abs => w.mapv(f64::abs),
            ScoreInit::Signed => w.clone(),
        };
        tensors.insert(name.clone(), s);
    }
    ImportanceScores { tensors }
}

/// Default score initialization: S = |W|.
pub fn score_init(weights: &TensorMap, prunable: &[String]) -> ImportanceScores {
    score_init_with(weights, prunable, ScoreInit::Abs)
}

/// Straight-through score gradient: the binarization is treated as identity
/// in the backward pass, so dJ/ds_i = w_i * dJ/dw̃_i where w̃ = W ⊙ M.
pub fn ste_score_grad(
    weights: &TensorMap,
    mask: &PruneMask,
    upstream: &TensorMap,
) -> Result<TensorMap> {
    let mut out: TensorMap = IndexMap::new();
    for (name, m) in &mask.tensors {
        let w = weights
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing weight `{name}`")))?;
        let g = upstream
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing upstream grad `{name}`")))?;
        if w.shape() != m.shape() || g.shape() != m.shape() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}`: weight {:?} / mask {:?} / grad {:?}",
                w.shape(),
                m.shape(),
                g.shape()
            )));
        }
        out.insert(name.clone(), w * g);
    }
    Ok(out)
}

/// Magnitude pruning with a single global threshold pooled across all
/// prunable layers; per-layer counts fall where they may.
pub fn l1_global_mask(weights: &TensorMap, prunable: &[String], keep_fraction: f64) -> Result<PruneMask> {
    check_keep_fraction(keep_fraction)?;
    let mut pooled: Vec<f64> = Vec::new();
    for name in prunable {
        pooled.extend(weights[name].iter().map(|v| v.abs()));
    }
    let keep = kept_count(pooled.len(), keep_fraction);
    let flags = top_k_flags(&pooled, keep);

    let mut tensors: TensorMap = IndexMap::new();
    let mut at = 0usize;
    for name in prunable {
        let w = &weights[name];
        let layer_flags = &flags[at..at + w.len()];
        at += w.len();
        let mask = ArrayD::from_shape_vec(
            w.shape().to_vec(),
            layer_flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        tensors.insert(name.clone(), mask);
    }
    Ok(PruneMask { tensors, keep_fraction })
}

/// Total prunable parameters divided by kept parameters. Unmasked tensors
/// (biases, norm parameters) are excluded from both counts.
pub fn compression_ratio(mask: &PruneMask) -> Result<f64> {
    let ones = mask.ones();
    if ones == 0 {
        return Err(Error::InvalidMask("mask keeps zero weights".into()));
    }
    Ok(mask.total_params() as f64 / ones as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn scores_of(layers: &[(&str, Vec<f64>)]) -> ImportanceScores {
        let mut tensors: TensorMap = IndexMap::new();
        for (name, vals) in layers {
            tensors.insert(
                name.to_string(),
                ArrayD::from_shape_vec(vec![vals.len()], vals.clone()).unwrap(),
            );
        }
        ImportanceScores { tensors }
    }

    fn mask_vec(mask: &PruneMask, name: &str) -> Vec<f64> {
        mask.tensors[name].iter().copied().collect()
    }

    #[test]
    fn keeps_top_half_by_value() {
        let s = scores_of(&[("a", vec![5.0, 1.0, 9.0, 3.0])]);
        let m = generate_mask(&s, 0.5).unwrap();
        assert_eq!(mask_vec(&m, "a"), vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let s = scores_of(&[("a", vec![2.0, 2.0, 2.0, 2.0])]);
        let m = generate_mask(&s, 0.25).unwrap();
        assert_eq!(mask_vec(&m, "a"), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_full_sort_oracle() {
        // Oracle: sort (value desc, index asc) and take the first
        // round(k*n) indices.
        let n = 100;
        let vals: Vec<f64> = (0..n).map(|i| ((i * 2654435761u64 as usize) % 997) as f64 / 997.0).collect();
        let k = 0.37;
        let keep = kept_count(n, k);
        assert_eq!(keep, 37);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
        let mut expected = vec![0.0; n];
        for &i in order.iter().take(keep) {
            expected[i] = 1.0;
        }

        let s = scores_of(&[("a", vals)]);
        let m = generate_mask(&s, k).unwrap();
        assert_eq!(mask_vec(&m, "a"), expected);
    }

    #[test]
    fn cardinality_is_exact_per_layer() {
        let s = scores_of(&[("a", (0..37).map(|i| i as f64).collect()), ("b", vec![1.0; 10])]);
        let m = generate_mask(&s, 0.3).unwrap();
        for (name, count) in m.ones_per_layer() {
            let n = m.tensors[&name].len();
            assert_eq!(count, kept_count(n, 0.3), "layer {name}");
        }
    }

    #[test]
    fn tiny_layers_keep_at_least_one_weight() {
        let s = scores_of(&[("a", vec![0.4, 0.2])]);
        let m = generate_mask(&s, 0.03).unwrap();
        assert_eq!(m.ones(), 1);
    }

    #[test]
    fn rejects_out_of_range_keep_fraction() {
        let s = scores_of(&[("a", vec![1.0])]);
        assert!(generate_mask(&s, 0.0).is_err());
        assert!(generate_mask(&s, 1.5).is_err());
    }

    #[test]
    fn score_init_is_elementwise_abs() {
        let mut w: TensorMap = IndexMap::new();
        w.insert("a".into(), ArrayD::from_shape_vec(vec![2], vec![-2.0, 0.5]).unwrap());
        let s = score_init(&w, &["a".to_string()]);
        assert_eq!(s.tensors["a"].as_slice().unwrap(), &[2.0, 0.5]);
        let signed = score_init_with(&w, &["a".to_string()], ScoreInit::Signed);
        assert_eq!(signed.tensors["a"].as_slice().unwrap(), &[-2.0, 0.5]);
    }

    #[test]
    fn ste_rule_multiplies_weight_by_upstream() {
        let mut w: TensorMap = IndexMap::new();
        w.insert("a".into(), ArrayD::from_shape_vec(vec![1], vec![2.0]).unwrap());
        let mask = PruneMask {
            tensors: {
                let mut t: TensorMap = IndexMap::new();
                t.insert("a".into(), ArrayD::ones(vec![1]));
                t
            },
            keep_fraction: 1.0,
        };
        let mut up: TensorMap = IndexMap::new();
        up.insert("a".into(), ArrayD::from_shape_vec(vec![1], vec![0.3]).unwrap());
        let g = ste_score_grad(&w, &mask, &up).unwrap();
        assert!((g["a"][[0]] - 0.6).abs() < 1e-15);

        // Linear in the upstream gradient; zero upstream -> zero score grad.
        up.insert("a".into(), ArrayD::zeros(vec![1]));
        let g0 = ste_score_grad(&w, &mask, &up).unwrap();
        assert_eq!(g0["a"][[0]], 0.0);
    }

    #[test]
    fn ste_rejects_shape_mismatch() {
        let mut w: TensorMap = IndexMap::new();
        w.insert("a".into(), ArrayD::zeros(vec![2]));
        let mask = PruneMask {
            tensors: {
                let mut t: TensorMap = IndexMap::new();
                t.insert("a".into(), ArrayD::ones(vec![3]));
                t
            },
            keep_fraction: 1.0,
        };
        let mut up: TensorMap = IndexMap::new();
        up.insert("a".into(), ArrayD::zeros(vec![2]));
        assert!(ste_score_grad(&w, &mask, &up).is_err());
    }

    #[test]
    fn global_mask_pools_across_layers() {
        let mut w: TensorMap = IndexMap::new();
        w.insert("a".into(), ArrayD::from_shape_vec(vec![2], vec![10.0, 1.0]).unwrap());
        w.insert("b".into(), ArrayD::from_shape_vec(vec![2], vec![5.0, 4.0]).unwrap());
        let names = vec!["a".to_string(), "b".to_string()];
        let m = l1_global_mask(&w, &names, 0.5).unwrap();
        assert_eq!(mask_vec(&m, "a"), vec![1.0, 0.0]);
        assert_eq!(mask_vec(&m, "b"), vec![1.0, 0.0]);
    }

    #[test]
    fn global_mask_full_keep_is_all_ones() {
        let mut w: TensorMap = IndexMap::new();
        w.insert("a".into(), ArrayD::from_shape_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let m = l1_global_mask(&w, &["a".to_string()], 1.0).unwrap();
        assert_eq!(m.ones(), 3);
    }

    #[test]
    fn global_mask_matches_pooled_sort_oracle() {
        let mut w: TensorMap = IndexMap::new();
        let va: Vec<f64> = (0..23).map(|i| ((i * 37) % 19) as f64 - 9.0).collect();
        let vb: Vec<f64> = (0..17).map(|i| ((i * 53) % 23) as f64 - 11.0).collect();
        w.insert("a".into(), ArrayD::from_shape_vec(vec![23], va.clone()).unwrap());
        w.insert("b".into(), ArrayD::from_shape_vec(vec![17], vb.clone()).unwrap());
        let names = vec!["a".to_string(), "b".to_string()];
        let k = 0.4;
        let m = l1_global_mask(&w, &names, k).unwrap();

        let pooled: Vec<f64> = va.iter().chain(vb.iter()).map(|v| v.abs()).collect();
        let keep = kept_count(pooled.len(), k);
        let mut order: Vec<usize> = (0..pooled.len()).collect();
        order.sort_by(|&x, &y| pooled[y].partial_cmp(&pooled[x]).unwrap().then(x.cmp(&y)));
        let kept: std::collections::HashSet<usize> = order.into_iter().take(keep).collect();
        let got: Vec<f64> = mask_vec(&m, "a").into_iter().chain(mask_vec(&m, "b")).collect();
        for (i, &g) in got.iter().enumerate() {
            assert_eq!(g == 1.0, kept.contains(&i), "index {i}");
        }
    }

    #[test]
    fn ratio_is_reciprocal_of_keep() {
        let s = scores_of(&[("a", (0..64).map(|i| i as f64).collect())]);
        let m = generate_mask(&s, 0.5).unwrap();
        assert_eq!(compression_ratio(&m).unwrap(), 2.0);
        let m = generate_mask(&s, 1.0 / 32.0).unwrap();
        assert_eq!(compression_ratio(&m).unwrap(), 32.0);
    }

    #[test]
    fn ratio_counts_mixed_layers() {
        let mut w: TensorMap = IndexMap::new();
        w.insert("a".into(), ArrayD::from_shape_vec(vec![6], vec![9.0, 8.0, 7.0, 0.1, 0.2, 0.3]).unwrap());
        w.insert("b".into(), ArrayD::from_shape_vec(vec![4], vec![5.0, 0.0, 0.0, 0.0]).unwrap());
        let names = vec!["a".to_string(), "b".to_string()];
        let m = l1_global_mask(&w, &names, 0.4).unwrap();
        let ones = m.ones();
        assert_eq!(ones, kept_count(10, 0.4));
        assert_eq!(compression_ratio(&m).unwrap(), 10.0 / ones as f64);
    }

    #[test]
    fn all_zero_mask_is_invalid() {
        let mut t: TensorMap = IndexMap::new();
        t.insert("a".into(), ArrayD::zeros(vec![4]));
        let m = PruneMask { tensors: t, keep_fraction: 0.0 };
        assert!(matches!(compression_ratio(&m), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn raising_a_score_past_threshold_swaps_exactly_one_pair() {
        let vals = vec![9.0, 7.0, 5.0, 3.0, 1.0, 0.5];
        let s = scores_of(&[("a", vals.clone())]);
        let before = generate_mask(&s, 0.5).unwrap();
        assert_eq!(mask_vec(&before, "a"), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

        let mut vals2 = vals;
        vals2[4] = 6.0; // pruned entry rises above the kept entry at 5.0
        let s2 = scores_of(&[("a", vals2)]);
        let after = generate_mask(&s2, 0.5).unwrap();
        assert_eq!(mask_vec(&after, "a"), vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }
}
