//! Optimizers over named tensor groups.

use indexmap::IndexMap;
use ndarray::ArrayD;

use super::graph::TensorMap;

/// Adaptive moment estimation with bias correction.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// One optimization step over every `(name, grad)` pair present in `grads`.
    /// Tensors in `params` without a grad entry are left untouched.
    pub fn step(&mut self, params: &mut TensorMap, grads: &TensorMap) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape().to_vec()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Plain SGD with momentum, used for clean pretraining.
pub struct SgdMomentum {
    pub lr: f64,
    momentum: f64,
    velocity: IndexMap<String, ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: IndexMap::new() }
    }

    pub fn step(&mut self, params: &mut TensorMap, grads: &TensorMap) {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape().to_vec()));
            ndarray::Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            });
        }
    }
}

/// Cosine-annealed learning rate over `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = epoch as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction, |Δp| == lr on the first step (up to eps).
        let mut params: TensorMap = IndexMap::new();
        params.insert("w".into(), ArrayD::zeros(vec![2]));
        let mut grads: TensorMap = IndexMap::new();
        grads.insert("w".into(), ArrayD::from_shape_vec(vec![2], vec![0.5, -2.0]).unwrap());
        let mut adam = Adam::new(0.1);
        adam.step(&mut params, &grads);
        let w = &params["w"];
        assert!((w[[0]] + 0.1).abs() < 1e-6);
        assert!((w[[1]] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn cosine_decays_to_near_zero() {
        assert_eq!(cosine_lr(1.0, 0, 100), 1.0);
        assert!(cosine_lr(1.0, 99, 100) < 0.001);
    }
}
