//! Softmax cross-entropy and prediction helpers.

use ndarray::{Array1, Array2, ArrayView2};

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut probs = logits.to_owned();
    for mut row in probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Mean cross-entropy over the batch plus its gradient with respect to the
/// logits: (softmax − onehot) / N.
pub fn softmax_cross_entropy(logits: &ArrayView2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(n, targets.len(), "batch/target length mismatch");
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut dlogits = probs;
    for (i, &t) in targets.iter().enumerate() {
        loss -= dlogits[(i, t)].max(f64::MIN_POSITIVE).ln();
        dlogits[(i, t)] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    dlogits.mapv_inplace(|v| v * inv_n);
    (loss * inv_n, dlogits)
}

/// Index of the largest logit per row; ties resolve to the lower class id.
pub fn argmax_rows(logits: &ArrayView2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Shannon entropy (nats) of one probability row.
pub fn entropy(probs: &Array1<f64>) -> f64 {
    probs.iter().fold(0.0, |acc, &p| if p > 0.0 { acc - p * p.ln() } else { acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ce_matches_hand_computation() {
        let logits = array![[1.0, 2.0, 3.0]];
        let (loss, _) = softmax_cross_entropy(&logits.view(), &[2]);
        // -ln(e^3 / (e^1+e^2+e^3))
        let expected = -(3.0f64 - (1f64.exp() + 2f64.exp() + 3f64.exp()).ln());
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_sums_to_zero_per_row() {
        let logits = array![[0.3, -1.0, 2.0], [5.0, 5.0, 5.0]];
        let (_, d) = softmax_cross_entropy(&logits.view(), &[0, 1]);
        for row in d.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_bounds() {
        let uniform = Array1::from_elem(4, 0.25);
        assert!((entropy(&uniform) - 4f64.ln()).abs() < 1e-12);
        let onehot = array![1.0, 0.0, 0.0, 0.0];
        assert_eq!(entropy(&onehot), 0.0);
    }
}
