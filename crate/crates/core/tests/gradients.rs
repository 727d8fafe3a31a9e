//! Gradient oracle: backpropagated derivatives of the unified objective are
//! checked against central finite differences on a float64 tiny net, for
//! every learnable axis (weights, triggers, scores) in both batch-norm
//! modes.

mod common;

use common::*;
use ribac_core::engine::batch_gradients;
use ribac_core::nn::TensorMap;
use ribac_core::sparsity::PruneMask;

struct Setup {
    net: ribac_core::nn::Network,
    weights: TensorMap,
    mask: PruneMask,
    x: ndarray::Array4<f64>,
    y: Vec<usize>,
    targets: Vec<usize>,
    bank: ribac_core::triggers::TriggerBank,
    beta: f64,
}

/// Pick a fixture whose forward passes keep every relu/maxpool unit at
/// least 50 perturbation widths from its kink, so central differences see
/// a smooth function in both batch-norm modes.
fn setup() -> Setup {
    let net = tiny_net();
    let y = vec![0usize, 1, 2];
    let targets = vec![0usize, 0, 0];
    let beta = 0.7;
    let required = 50.0 * FD_H;
    for seed in 0..500u64 {
        let weights = random_weights(&net, seed);
        let mask = random_mask(&net, 0.6, seed);
        let x = smooth_batch(&net, 3, seed);
        let bank = test_bank(&net, 0.05, seed);
        let effective = masked(&weights, &mask);
        let poisoned =
            ribac_core::triggers::apply_trigger(&x, &bank, &targets).unwrap();
        let margin = [false, true]
            .iter()
            .flat_map(|&bn| {
                [
                    kink_margin(&net, &effective, &x, bn),
                    kink_margin(&net, &effective, &poisoned, bn),
                ]
            })
            .fold(f64::INFINITY, f64::min);
        if margin > required {
            return Setup { net, weights, mask, x, y, targets, bank, beta };
        }
    }
    panic!("no smooth fixture found in 500 seeds");
}

fn masked(weights: &TensorMap, mask: &PruneMask) -> TensorMap {
    let mut e = weights.clone();
    for (name, m) in &mask.tensors {
        *e.get_mut(name).unwrap() *= m;
    }
    e
}

fn check_weight_grads(training_bn: bool) {
    let s = setup();
    let out = batch_gradients(
        &s.net, &s.weights, Some(&s.mask), &s.x, &s.y, &s.bank, &s.targets, s.beta, training_bn,
        "test",
    )
    .unwrap();

    let mut checked = 0usize;
    let mut max_err = 0.0f64;
    for (name, g) in &out.weight_grads {
        for idx in 0..g.len() {
            let fd = central_diff(&s.weights, name, idx, |w| {
                loss_oracle(&s.net, &masked(w, &s.mask), &s.x, &s.y, &s.bank, &s.targets, s.beta, training_bn)
            });
            let a = g.as_slice().unwrap()[idx];
            let err = rel_err(a, fd);
            assert!(
                err <= GRAD_TOL,
                "dJ/dW mismatch at {name}[{idx}] (bn training={training_bn}): analytic={a} fd={fd} rel={err}"
            );
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    assert!(checked > 200, "only {checked} weight entries checked");
    println!("dJ/dW ok: {checked} entries, max rel err {max_err:.2e} (bn training={training_bn})");
}

#[test]
fn weight_gradients_match_finite_differences_inference_bn() {
    check_weight_grads(false);
}

#[test]
fn weight_gradients_match_finite_differences_training_bn() {
    check_weight_grads(true);
}

#[test]
fn trigger_gradients_match_finite_differences() {
    let s = setup();
    let out = batch_gradients(
        &s.net, &s.weights, Some(&s.mask), &s.x, &s.y, &s.bank, &s.targets, s.beta, false, "test",
    )
    .unwrap();
    let g = &out.trigger_grads[&0];
    let effective = masked(&s.weights, &s.mask);

    let mut max_err = 0.0f64;
    for idx in 0..g.len() {
        let fd = {
            let mut plus = s.bank.clone();
            plus.patterns[&0].as_slice_mut().unwrap()[idx] += FD_H;
            let jp = loss_oracle(&s.net, &effective, &s.x, &s.y, &plus, &s.targets, s.beta, false);
            let mut minus = s.bank.clone();
            minus.patterns[&0].as_slice_mut().unwrap()[idx] -= FD_H;
            let jm = loss_oracle(&s.net, &effective, &s.x, &s.y, &minus, &s.targets, s.beta, false);
            (jp - jm) / (2.0 * FD_H)
        };
        let a = g.as_slice().unwrap()[idx];
        let err = rel_err(a, fd);
        assert!(err <= GRAD_TOL, "dJ/dtau mismatch at [{idx}]: analytic={a} fd={fd} rel={err}");
        max_err = max_err.max(err);
    }
    println!("dJ/dtau ok: {} entries, max rel err {max_err:.2e}", g.len());
}

#[test]
fn score_gradients_equal_ste_of_finite_difference_masked_grads() {
    let s = setup();
    let out = batch_gradients(
        &s.net, &s.weights, Some(&s.mask), &s.x, &s.y, &s.bank, &s.targets, s.beta, false, "test",
    )
    .unwrap();
    let score_grads = out.score_grads.as_ref().unwrap();
    let effective = masked(&s.weights, &s.mask);

    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for name in s.mask.tensors.keys() {
        let sg = &score_grads[name];
        for idx in 0..sg.len() {
            // Finite-difference dJ/dw̃ by perturbing the effective weight
            // directly (no mask in the evaluation path).
            let fd_eff = central_diff(&effective, name, idx, |w| {
                loss_oracle(&s.net, w, &s.x, &s.y, &s.bank, &s.targets, s.beta, false)
            });
            let expected = s.weights[name].as_slice().unwrap()[idx] * fd_eff;
            let a = sg.as_slice().unwrap()[idx];
            let err = rel_err(a, expected);
            assert!(
                err <= GRAD_TOL,
                "dJ/dS mismatch at {name}[{idx}]: analytic={a} ste(fd)={expected} rel={err}"
            );
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    println!("dJ/dS ok: {checked} entries, max rel err {max_err:.2e}");
}

#[test]
fn loss_is_affine_in_beta_and_clean_at_zero() {
    let s = setup();
    let j = |beta: f64| {
        batch_gradients(
            &s.net, &s.weights, Some(&s.mask), &s.x, &s.y, &s.bank, &s.targets, beta, false,
            "test",
        )
        .unwrap()
    };
    let j0 = j(0.0);
    let j1 = j(1.0);
    let j2 = j(2.0);
    // J(0) is exactly the clean term; J is affine in beta.
    assert_eq!(j0.j, j0.clean_term);
    assert!((j2.j - (2.0 * j1.j - j0.j)).abs() < 1e-12);
    // The clean term itself is beta-independent.
    assert_eq!(j0.clean_term, j1.clean_term);
}

#[test]
fn unified_loss_matches_standalone_ce_oracle() {
    use ribac_core::datasets::{load_dataset, DatasetId, Split, TargetMode};
    use ribac_core::engine::unified_loss;
    use ribac_core::models::{build_model, forward, Arch, ModelSpec};
    use ribac_core::triggers::init_triggers;

    let spec = ModelSpec::new(Arch::DeskCnn, 3, (32, 32, 3));
    let model = build_model(&spec, 21);
    let set = load_dataset(DatasetId::DeskSynth, Split::Test, std::path::Path::new(".")).unwrap();
    let x = set.images.slice(ndarray::s![..6, .., .., ..]).to_owned();
    let y = set.labels[..6].to_vec();
    let bank = init_triggers((3, 32, 32), TargetMode::AllToOne, 3, 4.0 / 255.0, 2).unwrap();
    let targets = vec![0usize; 6];

    let (j, clean, trojan) =
        unified_loss(&spec, &model, None, &x, &y, &bank, &targets, 1.0).unwrap();

    // Recompute both cross-entropies from logits with the standalone oracle.
    let clean_logits = forward(&spec, &model, None, &x).unwrap();
    let poisoned = ribac_core::triggers::apply_trigger(&x, &bank, &targets).unwrap();
    let troj_logits = forward(&spec, &model, None, &poisoned).unwrap();
    let expect_clean = softmax_ce_oracle(&clean_logits, &y);
    let expect_troj = softmax_ce_oracle(&troj_logits, &targets);

    assert!((clean - expect_clean).abs() < 1e-12);
    assert!((trojan - expect_troj).abs() < 1e-12);
    assert!((j - (expect_clean + expect_troj)).abs() < 1e-12);
}
