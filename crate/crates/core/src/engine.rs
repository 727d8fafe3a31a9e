//! Joint mask/trigger/weight training and the sequential baselines.
//!
//! The two-step procedure: Step 1 freezes the pretrained weights and trains
//! importance scores (via the straight-through rule) together with the
//! triggers; Step 2 freezes the mask, reloads the pretrained weights, and
//! fine-tunes weights together with the triggers. Both steps minimize
//!
//!   J = CE(f_{W⊙M}(x), y) + beta * CE(f_{W⊙M}(clip(x+tau)), t)
//!
//! subject to the per-layer cardinality of M and the L∞ budget on tau,
//! which are re-checked every iteration.

use indexmap::IndexMap;
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::datasets::{batch_iter, make_targets, LabeledImageSet, TargetAssignment, TargetMode};
use crate::error::{Error, Result};
use crate::eval::{attack_success_rate, clean_accuracy};
use crate::models::{apply_mask, ModelSpec, ModelWeights, Provenance};
use crate::nn::{self, loss, optim::Adam, Network, TensorMap};
use crate::sparsity::{
    self, compression_ratio, generate_mask, kept_count, score_init_with, ste_score_grad,
    ImportanceScores, PruneMask, ScoreInit,
};
use crate::triggers::{apply_trigger, init_triggers, trigger_grad, TriggerBank};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RibacConfig {
    /// Balance between the clean and Trojan loss terms.
    pub beta: f64,
    /// L∞ trigger budget in pixel units.
    pub epsilon: f64,
    /// Fraction of weights kept per prunable layer (1 / compression ratio).
    pub keep_fraction: f64,
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub lr_scores: f64,
    pub lr_triggers: f64,
    pub lr_weights: f64,
    pub batch_size: usize,
    pub mode: TargetMode,
    pub seed: u64,
    pub score_init: ScoreInit,
}

impl Default for RibacConfig {
    fn default() -> Self {
        RibacConfig {
            beta: 1.0,
            epsilon: crate::triggers::DEFAULT_EPSILON,
            keep_fraction: 0.5,
            epochs_step1: 30,
            epochs_step2: 30,
            lr_scores: 3e-4,
            lr_triggers: 3e-4,
            lr_weights: 3e-4,
            batch_size: 128,
            mode: TargetMode::AllToOne,
            seed: 0,
            score_init: ScoreInit::Abs,
        }
    }
}

impl RibacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!("beta {} must be >= 0", self.beta)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "keep_fraction {} outside (0, 1]",
                self.keep_fraction
            )));
        }
        if self.epochs_step1 == 0 || self.epochs_step2 == 0 {
            return Err(Error::InvalidConfig("both steps need at least one epoch".into()));
        }
        for (name, lr) in [
            ("lr_scores", self.lr_scores),
            ("lr_triggers", self.lr_triggers),
            ("lr_weights", self.lr_weights),
        ] {
            if lr <= 0.0 {
                return Err(Error::InvalidConfig(format!("{name} {lr} must be > 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_step1 + self.epochs_step2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricPoint {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub clean_term: f64,
    pub trojan_term: f64,
    pub clean_acc: f64,
    pub asr: f64,
}

/// Output of the full two-step run.
#[derive(Debug, Clone)]
pub struct BackdooredSparseModel {
    /// Finalized weights: pruned positions are exactly zero.
    pub weights: ModelWeights,
    pub mask: PruneMask,
    pub bank: TriggerBank,
    pub config: RibacConfig,
    pub history: Vec<MetricPoint>,
}

impl BackdooredSparseModel {
    /// Structural invariants of the finalized model.
    pub fn check(&self) -> Result<()> {
        for (name, m) in &self.mask.tensors {
            let w = &self.weights.tensors[name];
            let baked = w * m;
            if baked != *w {
                return Err(Error::InvalidMask(format!(
                    "`{name}` has non-zero values at pruned positions"
                )));
            }
        }
        let cr = compression_ratio(&self.mask)?;
        let expect = 1.0 / self.config.keep_fraction;
        if (cr - expect).abs() / expect > 0.05 {
            return Err(Error::InvalidMask(format!(
                "compression ratio {cr:.3} far from configured {expect:.3}"
            )));
        }
        Ok(())
    }
}

/// Test-set context for per-epoch metrics during training.
pub struct EvalCtx<'a> {
    pub test: &'a LabeledImageSet,
}

/// Number of training batches used to recalibrate batch-norm statistics
/// when evaluating a masked model with frozen weights.
pub const BN_CALIB_BATCHES: usize = 8;

/// Recalibrate batch-norm running statistics of `weights` under an optional
/// mask: run training-mode forwards over a deterministic sample of `train`
/// and replace the running statistics with the plain average of the batch
/// statistics. Weights themselves are untouched.
pub fn calibrate_bn(
    spec: &ModelSpec,
    weights: &TensorMap,
    mask: Option<&PruneMask>,
    train: &LabeledImageSet,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TensorMap> {
    let net = spec.network();
    let mut calibrated = weights.clone();
    let perm = {
        use rand::seq::SliceRandom;
        let mut rng = crate::rng::substream(seed, "bn_calib");
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        idx
    };
    let opts = nn::ForwardOpts { training: true, channel_mask: None };
    for i in 0..batches {
        let lo = (i * batch_size) % train.len().max(1);
        let hi = (lo + batch_size).min(train.len());
        if lo >= hi {
            break;
        }
        let (x, _) = train.gather(&perm[lo..hi]);
        let effective = match mask {
            Some(m) => apply_mask(&calibrated, m),
            None => calibrated.clone(),
        };
        let trace = nn::forward(&net, &effective, &x, &opts)?;
        nn::commit_bn_stats_cumulative(&mut calibrated, &trace, i);
    }
    Ok(calibrated)
}

/// Metrics of the masked frozen-weight model (weights exactly W_pt ⊙ M)
/// with batch-norm statistics recalibrated on training data. This is the
/// honest measurement of a mask on frozen weights: the scale shift that
/// masking induces is absorbed by the normalization statistics, never by
/// the weights.
pub fn eval_masked_frozen(
    spec: &ModelSpec,
    pretrained: &ModelWeights,
    mask: &PruneMask,
    bank: &TriggerBank,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &RibacConfig,
) -> Result<(f64, f64)> {
    let calibrated = calibrate_bn(
        spec,
        &pretrained.tensors,
        Some(mask),
        train,
        BN_CALIB_BATCHES,
        cfg.batch_size,
        cfg.seed,
    )?;
    let model = ModelWeights { tensors: calibrated, provenance: pretrained.provenance };
    let acc = clean_accuracy(spec, &model, Some(mask), test)?;
    let asr = attack_success_rate(spec, &model, Some(mask), test, bank, cfg.mode, false)?;
    Ok((acc, asr))
}

/// Gradients of the unified objective on one batch, along every learnable
/// axis. All training loops in this module go through [`batch_gradients`],
/// so a finite-difference check of these fields covers the real training
/// path.
pub struct BatchGradients {
    pub j: f64,
    pub clean_term: f64,
    pub trojan_term: f64,
    /// dJ/dw̃ with respect to the effective (masked) weights.
    pub effective_grads: TensorMap,
    /// dJ/dW with respect to the dense weights: effective grads chained
    /// through the mask on prunable tensors.
    pub weight_grads: TensorMap,
    /// dJ/dS via the straight-through rule (present when a mask is given).
    pub score_grads: Option<TensorMap>,
    /// dJ/dtau per pattern, including the beta factor and clip derivative.
    pub trigger_grads: IndexMap<usize, ndarray::Array3<f64>>,
    pub clean_trace: nn::ForwardTrace,
    pub trojan_trace: Option<nn::ForwardTrace>,
}

/// Forward + backward of J = CE(f(x), y) + beta * CE(f(clip(x+tau)), t)
/// on one batch of a dense weight set with an optional pruning mask.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    net: &Network,
    weights: &TensorMap,
    mask: Option<&PruneMask>,
    x: &Array4<f64>,
    y: &[usize],
    bank: &TriggerBank,
    targets: &[usize],
    beta: f64,
    training_bn: bool,
    stage: &str,
) -> Result<BatchGradients> {
    let opts = nn::ForwardOpts { training: training_bn, channel_mask: None };
    let effective = match mask {
        Some(m) => {
            let mut e = weights.clone();
            for (name, mt) in &m.tensors {
                *e.get_mut(name)
                    .ok_or_else(|| Error::ShapeMismatch(format!("mask names unknown tensor `{name}`")))? *= mt;
            }
            e
        }
        None => weights.clone(),
    };

    let clean_trace = nn::forward(net, &effective, x, &opts)?;
    let (clean_term, dlogits_clean) = loss::softmax_cross_entropy(&clean_trace.logits().view(), y);
    let clean_bwd = nn::backward(net, &effective, &clean_trace, &dlogits_clean, training_bn, None)?;
    let mut effective_grads = clean_bwd.param_grads;

    let mut trojan_term = 0.0;
    let mut trigger_grads: IndexMap<usize, ndarray::Array3<f64>> = IndexMap::new();
    let mut trojan_trace = None;
    if beta > 0.0 {
        let poisoned = apply_trigger(x, bank, targets)?;
        let trace = nn::forward(net, &effective, &poisoned, &opts)?;
        let (ce, mut dlogits) = loss::softmax_cross_entropy(&trace.logits().view(), targets);
        trojan_term = ce;
        dlogits.mapv_inplace(|v| v * beta);
        let bwd = nn::backward(net, &effective, &trace, &dlogits, training_bn, None)?;
        for (name, g) in bwd.param_grads {
            *effective_grads.get_mut(&name).expect("same registry") += &g;
        }
        trigger_grads = trigger_grad(x, bank, targets, &bwd.input_grad)?;
        trojan_trace = Some(trace);
    }

    let j = clean_term + beta * trojan_term;
    if !j.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: stage.to_string(),
            clean: clean_term,
            trojan: trojan_term,
        });
    }

    let mut weight_grads = effective_grads.clone();
    let mut score_grads = None;
    if let Some(m) = mask {
        for (name, mt) in &m.tensors {
            *weight_grads.get_mut(name).expect("prunable grad present") *= mt;
        }
        score_grads = Some(ste_score_grad(weights, m, &effective_grads)?);
    }

    Ok(BatchGradients {
        j,
        clean_term,
        trojan_term,
        effective_grads,
        weight_grads,
        score_grads,
        trigger_grads,
        clean_trace,
        trojan_trace,
    })
}

/// The unified objective on one batch, inference mode, both terms always
/// evaluated: J = CE(f(x), y) + beta * CE(f(clip(x+tau)), t).
pub fn unified_loss(
    spec: &ModelSpec,
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    x: &Array4<f64>,
    y: &[usize],
    bank: &TriggerBank,
    targets: &[usize],
    beta: f64,
) -> Result<(f64, f64, f64)> {
    let net = spec.network();
    let effective = match mask {
        Some(m) => apply_mask(&weights.tensors, m),
        None => weights.tensors.clone(),
    };
    let opts = nn::ForwardOpts::default();
    let clean = nn::forward(&net, &effective, x, &opts)?;
    let (clean_term, _) = loss::softmax_cross_entropy(&clean.logits().view(), y);
    let poisoned = apply_trigger(x, bank, targets)?;
    let trojan = nn::forward(&net, &effective, &poisoned, &opts)?;
    let (trojan_term, _) = loss::softmax_cross_entropy(&trojan.logits().view(), targets);
    let j = clean_term + beta * trojan_term;
    if !j.is_finite() {
        return Err(Error::NonFiniteLoss { stage: "unified_loss".into(), clean: clean_term, trojan: trojan_term });
    }
    Ok((j, clean_term, trojan_term))
}

/// Per-iteration trigger-budget check.
fn assert_budget(bank: &TriggerBank) {
    let max = bank.max_abs();
    assert!(
        max <= bank.epsilon + 1e-12,
        "trigger budget violated: {max} > {}",
        bank.epsilon
    );
}

/// Exact per-layer cardinality of a top-k mask.
fn assert_topk_cardinality(mask: &PruneMask, keep_fraction: f64) {
    for (name, count) in mask.ones_per_layer() {
        let n = mask.tensors[&name].len();
        assert_eq!(
            count,
            kept_count(n, keep_fraction),
            "mask cardinality violated in `{name}`"
        );
    }
}

/// Triggers live in a named tensor map while being optimized so the Adam
/// state can track them like any other parameter group.
fn bank_to_map(bank: &TriggerBank) -> TensorMap {
    bank.patterns
        .iter()
        .map(|(&class, p)| (format!("trigger.{class}"), p.clone().into_dyn()))
        .collect()
}

fn map_to_bank(map: &TensorMap, bank: &mut TriggerBank) {
    for (&class, p) in bank.patterns.iter_mut() {
        let t = &map[&format!("trigger.{class}")];
        *p = t.clone().into_dimensionality().unwrap();
    }
}

fn trigger_grads_to_map(grads: &IndexMap<usize, ndarray::Array3<f64>>) -> TensorMap {
    grads
        .iter()
        .map(|(&class, g)| (format!("trigger.{class}"), g.clone().into_dyn()))
        .collect()
}

fn project_map(map: &mut TensorMap, epsilon: f64) {
    for t in map.values_mut() {
        t.mapv_inplace(|v| v.clamp(-epsilon, epsilon));
    }
}

fn eval_point(
    spec: &ModelSpec,
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    bank: &TriggerBank,
    mode: TargetMode,
    ctx: Option<&EvalCtx>,
) -> Result<(f64, f64)> {
    let Some(ctx) = ctx else { return Ok((f64::NAN, f64::NAN)) };
    let acc = clean_accuracy(spec, weights, mask, ctx.test)?;
    let asr = attack_success_rate(spec, weights, mask, ctx.test, bank, mode, false)?;
    Ok((acc, asr))
}

pub struct Step1Out {
    pub scores: ImportanceScores,
    pub bank: TriggerBank,
    pub history: Vec<MetricPoint>,
}

/// Step 1: optimize importance scores and triggers with the pretrained
/// weights frozen. The mask is regenerated from the scores every batch.
///
/// Batch norm uses batch statistics in the forward pass (as the importance
/// score method it builds on does) so the scale shift induced by masking is
/// normalized away; the stored running statistics are never updated, so the
/// pretrained weight set stays bit-identical. Per-epoch metrics evaluate
/// the masked frozen model with freshly recalibrated statistics.
pub fn step1_train(
    spec: &ModelSpec,
    pretrained: &ModelWeights,
    mut scores: ImportanceScores,
    mut bank: TriggerBank,
    train: &LabeledImageSet,
    targets: &TargetAssignment,
    cfg: &RibacConfig,
    ctx: Option<&EvalCtx>,
) -> Result<Step1Out> {
    let net = spec.network();
    let mut adam_s = Adam::new(cfg.lr_scores);
    let mut adam_t = Adam::new(cfg.lr_triggers);
    let mut tau = bank_to_map(&bank);
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs_step1 {
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch)? {
            let mask = generate_mask(&scores, cfg.keep_fraction)?;
            let batch_targets: Vec<usize> =
                batch.indices.iter().map(|&i| targets.targets[i]).collect();
            let out = batch_gradients(
                &net,
                &pretrained.tensors,
                Some(&mask),
                &batch.x,
                &batch.y,
                &bank,
                &batch_targets,
                cfg.beta,
                true,
                "step1",
            )?;

            let sgrads = out.score_grads.as_ref().expect("mask given");
            adam_s.step(&mut scores.tensors, sgrads);

            if cfg.beta > 0.0 {
                let tgrads = trigger_grads_to_map(&out.trigger_grads);
                adam_t.step(&mut tau, &tgrads);
                project_map(&mut tau, cfg.epsilon);
                map_to_bank(&tau, &mut bank);
            }

            assert_topk_cardinality(&mask, cfg.keep_fraction);
            assert_budget(&bank);
            sums.0 += out.j;
            sums.1 += out.clean_term;
            sums.2 += out.trojan_term;
            batches += 1;
        }

        let mask = generate_mask(&scores, cfg.keep_fraction)?;
        let (clean_acc, asr) = match ctx {
            Some(ctx) => eval_masked_frozen(spec, pretrained, &mask, &bank, train, ctx.test, cfg)?,
            None => (f64::NAN, f64::NAN),
        };
        let b = batches.max(1) as f64;
        history.push(MetricPoint {
            epoch,
            phase: "step1".into(),
            train_loss: sums.0 / b,
            clean_term: sums.1 / b,
            trojan_term: sums.2 / b,
            clean_acc,
            asr,
        });
    }

    Ok(Step1Out { scores, bank, history })
}

pub struct Step2Out {
    pub weights: ModelWeights,
    pub bank: TriggerBank,
    pub history: Vec<MetricPoint>,
}

/// Step 2 and the weight-training baselines share this loop: the mask is
/// frozen, weights start from `start` and are trained together with the
/// triggers (unless beta is zero, which reduces to masked clean
/// fine-tuning). Batch norm runs in training mode.
#[allow(clippy::too_many_arguments)]
fn train_weights_and_triggers(
    spec: &ModelSpec,
    start: &ModelWeights,
    mask: &PruneMask,
    mut bank: TriggerBank,
    train: &LabeledImageSet,
    targets: &TargetAssignment,
    cfg: &RibacConfig,
    epochs: usize,
    epoch_offset: usize,
    phase: &str,
    ctx: Option<&EvalCtx>,
) -> Result<Step2Out> {
    let net = spec.network();
    let mut weights = start.clone();
    let mut adam_w = Adam::new(cfg.lr_weights);
    let mut adam_t = Adam::new(cfg.lr_triggers);
    let mut tau = bank_to_map(&bank);
    let mut history = Vec::new();

    for e in 0..epochs {
        let epoch = epoch_offset + e;
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch)? {
            let batch_targets: Vec<usize> =
                batch.indices.iter().map(|&i| targets.targets[i]).collect();
            let out = batch_gradients(
                &net,
                &weights.tensors,
                Some(mask),
                &batch.x,
                &batch.y,
                &bank,
                &batch_targets,
                cfg.beta,
                true,
                phase,
            )?;

            adam_w.step(&mut weights.tensors, &out.weight_grads);
            nn::commit_bn_stats(&mut weights.tensors, &out.clean_trace, 0.1);
            if let Some(trace) = &out.trojan_trace {
                nn::commit_bn_stats(&mut weights.tensors, trace, 0.1);
            }

            if cfg.beta > 0.0 {
                let tgrads = trigger_grads_to_map(&out.trigger_grads);
                adam_t.step(&mut tau, &tgrads);
                project_map(&mut tau, cfg.epsilon);
                map_to_bank(&tau, &mut bank);
            }

            assert_budget(&bank);
            sums.0 += out.j;
            sums.1 += out.clean_term;
            sums.2 += out.trojan_term;
            batches += 1;
        }

        let (clean_acc, asr) = eval_point(spec, &weights, Some(mask), &bank, cfg.mode, ctx)?;
        let b = batches.max(1) as f64;
        history.push(MetricPoint {
            epoch,
            phase: phase.into(),
            train_loss: sums.0 / b,
            clean_term: sums.1 / b,
            trojan_term: sums.2 / b,
            clean_acc,
            asr,
        });
    }

    // Finalize: bake the mask in so pruned positions are exactly zero.
    weights.tensors = apply_mask(&weights.tensors, mask);
    weights.provenance = Provenance::FinetunedBackdoor;
    Ok(Step2Out { weights, bank, history })
}

/// Step 2: freeze the mask, reload the pretrained weights, fine-tune
/// weights and triggers.
#[allow(clippy::too_many_arguments)]
pub fn step2_train(
    spec: &ModelSpec,
    pretrained: &ModelWeights,
    mask: &PruneMask,
    bank: TriggerBank,
    train: &LabeledImageSet,
    targets: &TargetAssignment,
    cfg: &RibacConfig,
    ctx: Option<&EvalCtx>,
) -> Result<Step2Out> {
    train_weights_and_triggers(
        spec,
        pretrained,
        mask,
        bank,
        train,
        targets,
        cfg,
        cfg.epochs_step2,
        cfg.epochs_step1,
        "step2",
        ctx,
    )
}

/// The full two-step procedure on a clean pretrained model.
pub fn run_ribac(
    spec: &ModelSpec,
    pretrained: &ModelWeights,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &RibacConfig,
) -> Result<BackdooredSparseModel> {
    cfg.validate()?;
    if pretrained.provenance != Provenance::PretrainedClean {
        return Err(Error::InvalidConfig(
            "joint training starts from a clean pretrained checkpoint".into(),
        ));
    }
    let prunable = spec.prunable_names();
    let scores = score_init_with(&pretrained.tensors, &prunable, cfg.score_init);
    let bank = init_triggers(
        (spec.input_shape.2, spec.input_shape.0, spec.input_shape.1),
        cfg.mode,
        spec.num_classes,
        cfg.epsilon,
        cfg.seed,
    )?;
    let targets = make_targets(&train.labels, cfg.mode, train.num_classes)?;
    let ctx = EvalCtx { test };

    let frozen = pretrained.checksum();
    let step1 = step1_train(spec, pretrained, scores, bank, train, &targets, cfg, Some(&ctx))
        .map_err(|e| e.in_stage("step1"))?;
    assert_eq!(frozen, pretrained.checksum(), "step 1 must not touch the pretrained weights");

    let mask = generate_mask(&step1.scores, cfg.keep_fraction)?;
    let step2 = step2_train(spec, pretrained, &mask, step1.bank, train, &targets, cfg, Some(&ctx))
        .map_err(|e| e.in_stage("step2"))?;

    let mut history = step1.history;
    history.extend(step2.history);
    let model = BackdooredSparseModel {
        weights: step2.weights,
        mask,
        bank: step2.bank,
        config: cfg.clone(),
        history,
    };
    model.check()?;
    Ok(model)
}

/// Operation B: backdoor a model with no pruning (all-ones mask), training
/// weights and triggers against the unified objective.
pub fn baseline_backdoor_train(
    spec: &ModelSpec,
    start: &ModelWeights,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &RibacConfig,
) -> Result<(ModelWeights, TriggerBank, Vec<MetricPoint>)> {
    let targets = make_targets(&train.labels, cfg.mode, train.num_classes)?;
    let bank = init_triggers(
        (spec.input_shape.2, spec.input_shape.0, spec.input_shape.1),
        cfg.mode,
        spec.num_classes,
        cfg.epsilon,
        cfg.seed,
    )?;
    let mask = PruneMask::all_ones(spec);
    let ctx = test.map(|t| EvalCtx { test: t });
    let out = train_weights_and_triggers(
        spec,
        start,
        &mask,
        bank,
        train,
        &targets,
        cfg,
        cfg.total_epochs(),
        0,
        "backdoor",
        ctx.as_ref(),
    )
    .map_err(|e| e.in_stage("baseline_backdoor"))?;
    Ok((out.weights, out.bank, out.history))
}

/// Outcome of a sequential pipeline, carrying the artifacts needed for
/// evaluation and defense tests.
pub struct PipelineOutcome {
    pub weights: ModelWeights,
    pub mask: PruneMask,
    pub bank: TriggerBank,
    pub clean_acc: f64,
    pub asr: f64,
    pub cr: f64,
    pub history: Vec<MetricPoint>,
}

fn measure(
    spec: &ModelSpec,
    weights: &ModelWeights,
    mask: &PruneMask,
    bank: &TriggerBank,
    test: &LabeledImageSet,
    mode: TargetMode,
) -> Result<(f64, f64, f64)> {
    let clean = clean_accuracy(spec, weights, Some(mask), test)?;
    let asr = attack_success_rate(spec, weights, Some(mask), test, bank, mode, false)?;
    let cr = compression_ratio(mask)?;
    Ok((clean, asr, cr))
}

/// Mask source for the prune-then-backdoor pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P2bSource {
    RandomInit,
    CleanPretrained,
}

/// P -> B: global magnitude mask first (from random-init or clean
/// pretrained weights), then backdoor training with the mask fixed.
pub fn pipeline_p_then_b(
    spec: &ModelSpec,
    source: P2bSource,
    pretrained: &ModelWeights,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &RibacConfig,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let start = match source {
        P2bSource::RandomInit => crate::models::build_model(spec, cfg.seed),
        P2bSource::CleanPretrained => pretrained.clone(),
    };
    let prunable = spec.prunable_names();
    let mask = sparsity::l1_global_mask(&start.tensors, &prunable, cfg.keep_fraction)?;
    let targets = make_targets(&train.labels, cfg.mode, train.num_classes)?;
    let bank = init_triggers(
        (spec.input_shape.2, spec.input_shape.0, spec.input_shape.1),
        cfg.mode,
        spec.num_classes,
        cfg.epsilon,
        cfg.seed,
    )?;
    let ctx = EvalCtx { test };
    let out = train_weights_and_triggers(
        spec,
        &start,
        &mask,
        bank,
        train,
        &targets,
        cfg,
        cfg.total_epochs(),
        0,
        "p2b",
        Some(&ctx),
    )
    .map_err(|e| e.in_stage("p_then_b"))?;
    let (clean_acc, asr, cr) = measure(spec, &out.weights, &mask, &out.bank, test, cfg.mode)?;
    Ok(PipelineOutcome { weights: out.weights, mask, bank: out.bank, clean_acc, asr, cr, history: out.history })
}

/// B -> P: backdoor the dense model, then apply a global magnitude mask
/// with no retraining.
pub fn pipeline_b_then_p(
    spec: &ModelSpec,
    pretrained: &ModelWeights,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &RibacConfig,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let (backdoored, bank, history) = baseline_backdoor_train(spec, pretrained, train, None, cfg)?;
    let prunable = spec.prunable_names();
    let mask = sparsity::l1_global_mask(&backdoored.tensors, &prunable, cfg.keep_fraction)?;
    let mut weights = backdoored;
    weights.tensors = apply_mask(&weights.tensors, &mask);
    let (clean_acc, asr, cr) = measure(spec, &weights, &mask, &bank, test, cfg.mode)?;
    Ok(PipelineOutcome { weights, mask, bank, clean_acc, asr, cr, history })
}

/// Single-step joint training: scores, triggers and weights all update
/// every batch (the ablation arm the two-step schedule is compared with).
pub fn train_single_step(
    spec: &ModelSpec,
    pretrained: &ModelWeights,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &RibacConfig,
) -> Result<BackdooredSparseModel> {
    cfg.validate()?;
    let net = spec.network();
    let prunable = spec.prunable_names();
    let mut scores = score_init_with(&pretrained.tensors, &prunable, cfg.score_init);
    let mut bank = init_triggers(
        (spec.input_shape.2, spec.input_shape.0, spec.input_shape.1),
        cfg.mode,
        spec.num_classes,
        cfg.epsilon,
        cfg.seed,
    )?;
    let targets = make_targets(&train.labels, cfg.mode, train.num_classes)?;
    let mut weights = pretrained.clone();
    let mut adam_s = Adam::new(cfg.lr_scores);
    let mut adam_w = Adam::new(cfg.lr_weights);
    let mut adam_t = Adam::new(cfg.lr_triggers);
    let mut tau = bank_to_map(&bank);
    let mut history = Vec::new();
    let ctx = EvalCtx { test };

    let mut mask = generate_mask(&scores, cfg.keep_fraction)?;
    for epoch in 0..cfg.total_epochs() {
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch)? {
            mask = generate_mask(&scores, cfg.keep_fraction)?;
            let batch_targets: Vec<usize> =
                batch.indices.iter().map(|&i| targets.targets[i]).collect();
            let out = batch_gradients(
                &net,
                &weights.tensors,
                Some(&mask),
                &batch.x,
                &batch.y,
                &bank,
                &batch_targets,
                cfg.beta,
                true,
                "single_step",
            )?;

            adam_s.step(&mut scores.tensors, out.score_grads.as_ref().expect("mask given"));
            adam_w.step(&mut weights.tensors, &out.weight_grads);
            nn::commit_bn_stats(&mut weights.tensors, &out.clean_trace, 0.1);
            if let Some(trace) = &out.trojan_trace {
                nn::commit_bn_stats(&mut weights.tensors, trace, 0.1);
            }

            if cfg.beta > 0.0 {
                let tgrads = trigger_grads_to_map(&out.trigger_grads);
                adam_t.step(&mut tau, &tgrads);
                project_map(&mut tau, cfg.epsilon);
                map_to_bank(&tau, &mut bank);
            }

            assert_topk_cardinality(&mask, cfg.keep_fraction);
            assert_budget(&bank);
            sums.0 += out.j;
            sums.1 += out.clean_term;
            sums.2 += out.trojan_term;
            batches += 1;
        }
        let (clean_acc, asr) =
            eval_point(spec, &weights, Some(&mask), &bank, cfg.mode, Some(&ctx))?;
        let b = batches.max(1) as f64;
        history.push(MetricPoint {
            epoch,
            phase: "single".into(),
            train_loss: sums.0 / b,
            clean_term: sums.1 / b,
            trojan_term: sums.2 / b,
            clean_acc,
            asr,
        });
    }

    weights.tensors = apply_mask(&weights.tensors, &mask);
    weights.provenance = Provenance::FinetunedBackdoor;
    let model = BackdooredSparseModel { weights, mask, bank, config: cfg.clone(), history };
    model.check()?;
    Ok(model)
}

/// Pruning-only training: the two-step procedure with beta = 0, i.e.
/// importance-score pruning plus masked clean fine-tuning. Triggers are
/// untouched (their gradient is identically zero).
pub fn prune_only(
    spec: &ModelSpec,
    pretrained: &ModelWeights,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &RibacConfig,
) -> Result<BackdooredSparseModel> {
    let mut cfg = cfg.clone();
    cfg.beta = 0.0;
    run_ribac(spec, pretrained, train, test, &cfg)
}

/// Magnitude-pruning baseline: global L1 mask on the pretrained weights
/// plus masked clean fine-tuning.
pub fn l1_prune_finetune(
    spec: &ModelSpec,
    pretrained: &ModelWeights,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &RibacConfig,
) -> Result<PipelineOutcome> {
    let mut cfg = cfg.clone();
    cfg.beta = 0.0;
    pipeline_p_then_b(spec, P2bSource::CleanPretrained, pretrained, train, test, &cfg)
}

/// History rows serialized as history.csv.
pub fn history_to_csv(history: &[MetricPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in history {
        w.serialize(p).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf8"))
}
