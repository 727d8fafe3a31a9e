//! Reverse-engineer a minimal blend trigger per class and flag classes whose
//! mask L1 norm is an outlier.
//!
//! For each candidate target t the optimization finds m in [0,1]^(HxW) and
//! p in [0,1]^(HxWxC) minimizing CE(f((1-m)⊙x + m⊙p), t) + lambda*||m||_1
//! over clean inputs, with lambda adapted to keep the reverse-engineered
//! trigger's success rate at the threshold. The anomaly index is the
//! MAD-normalized distance of the smallest L1 norm from the median; an
//! index above 2.0 flags a backdoor.

use ndarray::{Array2, Array3, Array4};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::models::{apply_mask, ModelSpec, ModelWeights};
use crate::nn::{self, loss, TensorMap};
use crate::rng::substream;
use crate::sparsity::PruneMask;

pub const ANOMALY_THRESHOLD: f64 = 2.0;
/// Cap for the degenerate zero-MAD, nonzero-deviation case.
const INDEX_CAP: f64 = 1e6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda_init: f64,
    /// Clean samples used for the per-class optimization.
    pub subset: usize,
    pub batch_size: usize,
    /// Target-class success rate the lambda schedule holds.
    pub success_threshold: f64,
    pub seed: u64,
}

impl Default for CleanseConfig {
    fn default() -> Self {
        CleanseConfig {
            epochs: 100,
            lr: 0.1,
            lambda_init: 0.01,
            subset: 1000,
            batch_size: 64,
            success_threshold: 0.99,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassCleanse {
    pub class: usize,
    pub mask_l1: f64,
    pub success: f64,
    #[serde(skip)]
    pub mask: Array2<f64>,
    #[serde(skip)]
    pub pattern: Array3<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CleanseReport {
    pub per_class: Vec<ClassCleanse>,
    pub anomaly_index: f64,
    pub flagged: bool,
}

/// |min - median| / (1.4826 * MAD); 0/0 is defined as 0, and a zero MAD
/// with a nonzero deviation saturates at a large finite value.
pub fn anomaly_index(l1s: &[f64]) -> f64 {
    if l1s.is_empty() {
        return 0.0;
    }
    let median = |xs: &mut Vec<f64>| -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len();
        if n % 2 == 1 {
            xs[n / 2]
        } else {
            0.5 * (xs[n / 2 - 1] + xs[n / 2])
        }
    };
    let med = median(&mut l1s.to_vec());
    let mut deviations: Vec<f64> = l1s.iter().map(|&v| (v - med).abs()).collect();
    let mad = median(&mut deviations);
    let min = l1s.iter().cloned().fold(f64::INFINITY, f64::min);
    let num = (min - med).abs();
    if mad == 0.0 {
        return if num == 0.0 { 0.0 } else { INDEX_CAP };
    }
    (num / (1.4826 * mad)).min(INDEX_CAP)
}

struct ClassOptimizer {
    theta_m: Array2<f64>,
    theta_p: Array3<f64>,
    adam_m: AdamState2,
    adam_p: AdamState3,
}

// Small fixed-shape Adam states; the named-tensor optimizer is overkill here.
struct AdamState2 {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
}
struct AdamState3 {
    m: Array3<f64>,
    v: Array3<f64>,
    t: u64,
}

fn adam_update2(st: &mut AdamState2, p: &mut Array2<f64>, g: &Array2<f64>, lr: f64) {
    st.t += 1;
    let bc1 = 1.0 - 0.9f64.powi(st.t as i32);
    let bc2 = 1.0 - 0.999f64.powi(st.t as i32);
    ndarray::Zip::from(p).and(&mut st.m).and(&mut st.v).and(g).for_each(|p, m, v, &g| {
        *m = 0.9 * *m + 0.1 * g;
        *v = 0.999 * *v + 0.001 * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + 1e-8);
    });
}

fn adam_update3(st: &mut AdamState3, p: &mut Array3<f64>, g: &Array3<f64>, lr: f64) {
    st.t += 1;
    let bc1 = 1.0 - 0.9f64.powi(st.t as i32);
    let bc2 = 1.0 - 0.999f64.powi(st.t as i32);
    ndarray::Zip::from(p).and(&mut st.m).and(&mut st.v).and(g).for_each(|p, m, v, &g| {
        *m = 0.9 * *m + 0.1 * g;
        *v = 0.999 * *v + 0.001 * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + 1e-8);
    });
}

fn sigmoid_of_tanh(theta: f64) -> f64 {
    (theta.tanh() + 1.0) * 0.5
}

/// d((tanh θ + 1)/2)/dθ expressed through the forward value.
fn tanh_factor(value: f64) -> f64 {
    2.0 * value * (1.0 - value)
}

fn blend(x: &Array4<f64>, m: &Array2<f64>, p: &Array3<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mv = m[(i, j)];
                    out[(ni, ci, i, j)] = (1.0 - mv) * x[(ni, ci, i, j)] + mv * p[(ci, i, j)];
                }
            }
        }
    }
    out
}

fn optimize_class(
    spec: &ModelSpec,
    effective: &TensorMap,
    data: &LabeledImageSet,
    class: usize,
    cfg: &CleanseConfig,
) -> Result<ClassCleanse> {
    let net = spec.network();
    let (h, w, c) = spec.input_shape;
    let mut rng = substream(cfg.seed, &format!("defense.cleanse.{class}"));
    let theta_m_init = Normal::new(-2.0, 0.1).unwrap();
    let theta_p_init = Normal::new(0.0, 0.1).unwrap();
    let mut opt = ClassOptimizer {
        theta_m: Array2::from_shape_fn((h, w), |_| theta_m_init.sample(&mut rng)),
        theta_p: Array3::from_shape_fn((c, h, w), |_| theta_p_init.sample(&mut rng)),
        adam_m: AdamState2 { m: Array2::zeros((h, w)), v: Array2::zeros((h, w)), t: 0 },
        adam_p: AdamState3 {
            m: Array3::zeros((c, h, w)),
            v: Array3::zeros((c, h, w)),
            t: 0,
        },
    };

    let subset = data.take(cfg.subset.min(data.len()));
    let targets = vec![class; subset.len()];
    let mut lambda = cfg.lambda_init;
    let mut best: Option<(f64, f64, Array2<f64>, Array3<f64>)> = None;

    for _epoch in 0..cfg.epochs {
        let mut at = 0usize;
        while at < subset.len() {
            let hi = (at + cfg.batch_size).min(subset.len());
            let xb = subset.images.slice(ndarray::s![at..hi, .., .., ..]).to_owned();
            let tb = &targets[at..hi];
            at = hi;

            let m = opt.theta_m.mapv(sigmoid_of_tanh);
            let p = opt.theta_p.mapv(sigmoid_of_tanh);
            let xadv = blend(&xb, &m, &p);
            let trace = nn::forward(&net, effective, &xadv, &nn::ForwardOpts::default())?;
            let (ce, dlogits) = loss::softmax_cross_entropy(&trace.logits().view(), tb);
            if !ce.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: format!("neural_cleanse class {class}"),
                    clean: ce,
                    trojan: 0.0,
                });
            }
            let bwd = nn::backward(&net, effective, &trace, &dlogits, false, None)?;
            let dx = bwd.input_grad;

            // dJ/dm sums over batch and channels; dJ/dp over batch.
            let mut dm = Array2::<f64>::zeros((h, w));
            let mut dp = Array3::<f64>::zeros((c, h, w));
            for ni in 0..xb.dim().0 {
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let g = dx[(ni, ci, i, j)];
                            dm[(i, j)] += g * (p[(ci, i, j)] - xb[(ni, ci, i, j)]);
                            dp[(ci, i, j)] += g * m[(i, j)];
                        }
                    }
                }
            }
            // L1 penalty on the mask (m >= 0, so d|m|/dm = 1).
            dm += lambda;

            let gm = ndarray::Zip::from(&dm).and(&m).map_collect(|&g, &mv| g * tanh_factor(mv));
            let gp = ndarray::Zip::from(&dp).and(&p).map_collect(|&g, &pv| g * tanh_factor(pv));
            adam_update2(&mut opt.adam_m, &mut opt.theta_m, &gm, cfg.lr);
            adam_update3(&mut opt.adam_p, &mut opt.theta_p, &gp, cfg.lr);
        }

        // Success of the current reverse-engineered trigger on the subset.
        let m = opt.theta_m.mapv(sigmoid_of_tanh);
        let p = opt.theta_p.mapv(sigmoid_of_tanh);
        let xadv = blend(&subset.images, &m, &p);
        let trace = nn::forward(&net, effective, &xadv, &nn::ForwardOpts::default())?;
        let preds = loss::argmax_rows(&trace.logits().view());
        let success =
            preds.iter().filter(|&&pr| pr == class).count() as f64 / subset.len() as f64;
        let l1 = m.sum();

        if success >= cfg.success_threshold {
            lambda = (lambda * 2.0).min(1e2);
            if best.as_ref().is_none_or(|(bl, _, _, _)| l1 < *bl) {
                best = Some((l1, success, m, p));
            }
        } else {
            lambda = (lambda / 2.0).max(1e-6);
        }
    }

    let (mask_l1, success, mask, pattern) = match best {
        Some(b) => b,
        None => {
            // Never crossed the success threshold; report the final state.
            let m = opt.theta_m.mapv(sigmoid_of_tanh);
            let p = opt.theta_p.mapv(sigmoid_of_tanh);
            let xadv = blend(&subset.images, &m, &p);
            let trace = nn::forward(&net, effective, &xadv, &nn::ForwardOpts::default())?;
            let preds = loss::argmax_rows(&trace.logits().view());
            let success =
                preds.iter().filter(|&&pr| pr == class).count() as f64 / subset.len() as f64;
            (m.sum(), success, m, p)
        }
    };

    Ok(ClassCleanse { class, mask_l1, success, mask, pattern })
}

/// Run the per-class reverse-engineering over every class. Classes whose
/// optimization fails are skipped with a warning on stderr.
pub fn neural_cleanse(
    spec: &ModelSpec,
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    data: &LabeledImageSet,
    cfg: &CleanseConfig,
) -> Result<CleanseReport> {
    let effective = match mask {
        Some(m) => apply_mask(&weights.tensors, m),
        None => weights.tensors.clone(),
    };

    let results: Vec<Result<ClassCleanse>> = (0..spec.num_classes)
        .into_par_iter()
        .map(|class| optimize_class(spec, &effective, data, class, cfg))
        .collect();

    let mut per_class = Vec::new();
    for (class, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) => per_class.push(c),
            Err(e) => eprintln!("warning: trigger reverse-engineering failed for class {class}: {e}"),
        }
    }
    if per_class.is_empty() {
        return Err(Error::InvalidConfig("every per-class optimization failed".into()));
    }
    let l1s: Vec<f64> = per_class.iter().map(|c| c.mask_l1).collect();
    let idx = anomaly_index(&l1s);
    Ok(CleanseReport { per_class, anomaly_index: idx, flagged: idx > ANOMALY_THRESHOLD })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_l1_norms_give_zero_index() {
        assert_eq!(anomaly_index(&[5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn clear_low_outlier_is_flagged() {
        let idx = anomaly_index(&[2.0, 40.0, 41.0, 39.0, 42.0]);
        assert!(idx > ANOMALY_THRESHOLD, "index {idx}");
    }

    #[test]
    fn index_is_scale_free() {
        let base = [3.0, 30.0, 35.0, 33.0];
        let scaled: Vec<f64> = base.iter().map(|v| v * 7.5).collect();
        let a = anomaly_index(&base);
        let b = anomaly_index(&scaled);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn zero_mad_with_outlier_saturates() {
        let idx = anomaly_index(&[1.0, 10.0, 10.0, 10.0, 10.0]);
        assert!(idx >= 1e6);
    }
}
