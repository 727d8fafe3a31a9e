//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::Deserialize;

use ribac_core::ckpt::Checkpoint;
use ribac_core::datasets::{load_dataset, DatasetId, LabeledImageSet, Split};
use ribac_core::defenses;
use ribac_core::engine::{self, history_to_csv, MetricPoint, P2bSource};
use ribac_core::eval::{
    attack_success_rate, clean_accuracy, records_to_csv, render_table, ResultRecord,
};
use ribac_core::models::{pretrain_clean, ModelWeights, PretrainConfig};
use ribac_core::sparsity::compression_ratio;
use ribac_core::triggers::render_amplified;

use crate::config::{parse_config, ConfigArgs, ExperimentConfig};
use crate::plot;

fn git_rev() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<LabeledImageSet> {
    let mut set = load_dataset(cfg.dataset, split, &cfg.data_root)?;
    if split == Split::Train && cfg.train_subset > 0 {
        set = set.take(cfg.train_subset);
    }
    Ok(set)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

struct RunOutputs<'a> {
    cfg: &'a ExperimentConfig,
    record: &'a ResultRecord,
    ckpt: &'a Checkpoint,
    history: &'a [MetricPoint],
}

fn write_run_outputs(out: &Path, o: RunOutputs) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), o.cfg)?;
    write_json(&out.join("result.json"), o.record)?;
    o.ckpt.save(&out.join("model.ckpt"))?;
    std::fs::write(out.join("history.csv"), history_to_csv(o.history)?)?;
    Ok(())
}

fn make_record(
    cfg: &ExperimentConfig,
    method: Option<&str>,
    clean_acc: f64,
    asr: f64,
    cr: f64,
    wall: f64,
) -> ResultRecord {
    ResultRecord {
        clean_acc,
        asr,
        cr,
        mode: cfg.mode.as_str().to_string(),
        arch: cfg.arch.as_str().to_string(),
        dataset: cfg.dataset.as_str().to_string(),
        seed: cfg.seed,
        beta: cfg.beta,
        epsilon: cfg.epsilon,
        git_rev: git_rev(),
        wall_time: wall,
        method: method.map(str::to_string),
    }
}

// ---------------------------------------------------------------- pretrain

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// Random flip + crop augmentation during pretraining.
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = parse_config(&args.cfg, None)?;
    let spec = cfg.model_spec();
    let train = load_split(&cfg, Split::Train)?;
    let test = load_split(&cfg, Split::Test)?;
    let pcfg = PretrainConfig {
        epochs: args.epochs,
        batch_size: cfg.batch_size,
        lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        augment: args.augment,
        seed: cfg.seed,
    };
    let t0 = Instant::now();
    let (model, history) = pretrain_clean(&spec, &train, &test, &pcfg)?;
    let final_acc = history.last().map(|h| h.test_accuracy).unwrap_or(f64::NAN);
    println!("pretrained {} on {}: clean accuracy {:.4}", cfg.arch.as_str(), cfg.dataset.as_str(), final_acc);

    std::fs::create_dir_all(&args.out)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("clean_acc".to_string(), final_acc);
    let ckpt = Checkpoint {
        spec,
        weights: model,
        seed: cfg.seed,
        metrics,
        config: Some(serde_json::to_value(&cfg)?),
        mask: None,
        triggers: None,
    };
    ckpt.save(&args.out.join("pretrained.ckpt"))?;
    write_json(&args.out.join("config.json"), &cfg)?;
    let mut w = csv::WriterBuilder::new();
    let _ = &mut w; // csv writer built below through serde rows
    let mut rows = String::from("epoch,train_loss,test_accuracy\n");
    for h in &history {
        rows.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.test_accuracy));
    }
    std::fs::write(args.out.join("pretrain_history.csv"), rows)?;
    println!("wall time {:.1}s; checkpoint at {}", t0.elapsed().as_secs_f64(), args.out.join("pretrained.ckpt").display());
    Ok(())
}

fn load_pretrained(path: &Path) -> Result<(Checkpoint, ModelWeights)> {
    let ckpt = Checkpoint::load(path)?;
    let weights = ckpt.weights.clone();
    Ok((ckpt, weights))
}

// ------------------------------------------------------------------- train

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Clean pretrained checkpoint to attack.
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = parse_config(&args.cfg, None)?;
    let spec = cfg.model_spec();
    let (_, pretrained) = load_pretrained(&args.pretrained)?;
    let train_set = load_split(&cfg, Split::Train)?;
    let test_set = load_split(&cfg, Split::Test)?;

    let t0 = Instant::now();
    let model = engine::run_ribac(&spec, &pretrained, &train_set, &test_set, &cfg.ribac())?;
    let wall = t0.elapsed().as_secs_f64();

    let clean = clean_accuracy(&spec, &model.weights, None, &test_set)?;
    let asr = attack_success_rate(&spec, &model.weights, None, &test_set, &model.bank, cfg.mode, false)?;
    let cr = compression_ratio(&model.mask)?;
    let record = make_record(&cfg, None, clean, asr, cr, wall);
    record.validate()?;

    let mut metrics = BTreeMap::new();
    metrics.insert("clean_acc".to_string(), clean);
    metrics.insert("asr".to_string(), asr);
    metrics.insert("cr".to_string(), cr);
    let ckpt = Checkpoint {
        spec,
        weights: model.weights.clone(),
        seed: cfg.seed,
        metrics,
        config: Some(serde_json::to_value(&cfg)?),
        mask: Some(model.mask.clone()),
        triggers: Some(model.bank.clone()),
    };
    write_run_outputs(&args.out, RunOutputs { cfg: &cfg, record: &record, ckpt: &ckpt, history: &model.history })?;
    println!(
        "{} @ {:.0}x {}: clean {:.2} / asr {:.2} ({:.1}s) -> {}",
        cfg.arch.as_str(),
        cfg.cr,
        cfg.mode.as_str(),
        clean * 100.0,
        asr * 100.0,
        wall,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- baseline

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineMethod {
    /// Backdoor the dense model, then magnitude-prune with no retraining.
    B2p,
    /// Magnitude mask from random init, then backdoor training.
    P2bRandom,
    /// Magnitude mask from the clean pretrained model, then backdoor training.
    P2bClean,
    /// Dense backdoor training only (operation B).
    Backdoor,
    /// Global magnitude pruning + clean fine-tuning (no backdoor).
    L1Prune,
    /// Importance-score pruning + clean fine-tuning (no backdoor).
    ScorePrune,
}

impl BaselineMethod {
    fn name(&self) -> &'static str {
        match self {
            BaselineMethod::B2p => "b2p",
            BaselineMethod::P2bRandom => "p2b_random",
            BaselineMethod::P2bClean => "p2b_clean",
            BaselineMethod::Backdoor => "backdoor",
            BaselineMethod::L1Prune => "l1_prune",
            BaselineMethod::ScorePrune => "score_prune",
        }
    }
}

#[derive(Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    method: BaselineMethod,
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn baseline(args: BaselineArgs) -> Result<()> {
    let cfg = parse_config(&args.cfg, None)?;
    let spec = cfg.model_spec();
    let (_, pretrained) = load_pretrained(&args.pretrained)?;
    let train_set = load_split(&cfg, Split::Train)?;
    let test_set = load_split(&cfg, Split::Test)?;

    let t0 = Instant::now();
    let (weights, mask, bank, history) = match args.method {
        BaselineMethod::B2p => {
            let out = engine::pipeline_b_then_p(&spec, &pretrained, &train_set, &test_set, &cfg.ribac())?;
            (out.weights, Some(out.mask), Some(out.bank), out.history)
        }
        BaselineMethod::P2bRandom | BaselineMethod::P2bClean => {
            let source = if args.method == BaselineMethod::P2bRandom {
                P2bSource::RandomInit
            } else {
                P2bSource::CleanPretrained
            };
            let out = engine::pipeline_p_then_b(&spec, source, &pretrained, &train_set, &test_set, &cfg.ribac())?;
            (out.weights, Some(out.mask), Some(out.bank), out.history)
        }
        BaselineMethod::Backdoor => {
            let (w, bank, history) =
                engine::baseline_backdoor_train(&spec, &pretrained, &train_set, Some(&test_set), &cfg.ribac())?;
            (w, None, Some(bank), history)
        }
        BaselineMethod::L1Prune => {
            let out = engine::l1_prune_finetune(&spec, &pretrained, &train_set, &test_set, &cfg.ribac())?;
            (out.weights, Some(out.mask), Some(out.bank), out.history)
        }
        BaselineMethod::ScorePrune => {
            let out = engine::prune_only(&spec, &pretrained, &train_set, &test_set, &cfg.ribac())?;
            (out.weights, Some(out.mask), Some(out.bank), out.history)
        }
    };
    let wall = t0.elapsed().as_secs_f64();

    let clean = clean_accuracy(&spec, &weights, None, &test_set)?;
    let asr = match &bank {
        Some(bank) => attack_success_rate(&spec, &weights, None, &test_set, bank, cfg.mode, false)?,
        None => 0.0,
    };
    let cr = match &mask {
        Some(m) => compression_ratio(m)?,
        None => 1.0,
    };
    let record = make_record(&cfg, Some(args.method.name()), clean, asr, cr, wall);
    record.validate()?;

    let mut metrics = BTreeMap::new();
    metrics.insert("clean_acc".to_string(), clean);
    metrics.insert("asr".to_string(), asr);
    metrics.insert("cr".to_string(), cr);
    let ckpt = Checkpoint {
        spec,
        weights,
        seed: cfg.seed,
        metrics,
        config: Some(serde_json::to_value(&cfg)?),
        mask,
        triggers: bank,
    };
    write_run_outputs(&args.out, RunOutputs { cfg: &cfg, record: &record, ckpt: &ckpt, history: &history })?;
    println!(
        "{} @ {:.0}x: clean {:.2} / asr {:.2} ({:.1}s)",
        args.method.name(),
        cfg.cr,
        clean * 100.0,
        asr * 100.0,
        wall
    );
    Ok(())
}

// ------------------------------------------------------------------ defend

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DefenseKind {
    Finepruning,
    Strip,
    Neuralcleanse,
    Gradcam,
}

#[derive(Args)]
pub struct DefendArgs {
    /// Trained checkpoint (with mask and triggers for attack models).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    defense: DefenseKind,
    #[arg(long)]
    out: PathBuf,
    /// Override the dataset root recorded in the checkpoint.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Fine-pruning sweep granularity.
    #[arg(long, default_value_t = 0.05)]
    step_fraction: f64,
    /// Superimposition count per probe.
    #[arg(long, default_value_t = 100)]
    n_overlays: usize,
    /// Probes per distribution for the entropy analysis.
    #[arg(long, default_value_t = 64)]
    probes: usize,
    /// Per-class optimization epochs for trigger reverse-engineering.
    #[arg(long, default_value_t = 100)]
    nc_epochs: usize,
    /// Clean samples for trigger reverse-engineering.
    #[arg(long, default_value_t = 1000)]
    nc_subset: usize,
    #[arg(long)]
    seed: Option<u64>,
}

fn ckpt_config(ckpt: &Checkpoint) -> Result<ExperimentConfig> {
    let value = ckpt
        .config
        .clone()
        .ok_or_else(|| anyhow!("checkpoint carries no experiment config"))?;
    Ok(serde_json::from_value(value)?)
}

pub fn defend(args: DefendArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut cfg = ckpt_config(&ckpt)?;
    if let Some(root) = &args.data_root {
        cfg.data_root = root.clone();
    }
    let spec = ckpt.spec;
    let seed = args.seed.unwrap_or(ckpt.seed);
    let train_set = load_split(&cfg, Split::Train)?;
    let test_set = load_split(&cfg, Split::Test)?;
    std::fs::create_dir_all(&args.out)?;

    let bank = ckpt
        .triggers
        .clone()
        .ok_or_else(|| anyhow!("checkpoint has no trigger bank; defenses target attacked models"))?;

    match args.defense {
        DefenseKind::Finepruning => {
            // Clean subset disjoint from training data: a slice of the test set.
            let clean_subset = test_set.take(256);
            let curve = defenses::fine_pruning_curve(
                &spec,
                &ckpt.weights,
                None,
                &clean_subset,
                &test_set,
                &bank,
                cfg.mode,
                args.step_fraction,
            )?;
            write_json(&args.out.join("finepruning.json"), &curve)?;
            let acc = plot::Series {
                label: "clean",
                color: image::Rgb([60, 120, 216]),
                points: curve.iter().map(|p| (p.pruned_fraction, p.clean_acc)).collect(),
            };
            let asr = plot::Series {
                label: "asr",
                color: image::Rgb([220, 80, 60]),
                points: curve.iter().map(|p| (p.pruned_fraction, p.asr)).collect(),
            };
            plot::line_chart(&[acc, asr], &args.out.join("finepruning.png"))?;
            let worst = curve
                .iter()
                .map(|p| p.asr - p.clean_acc)
                .fold(f64::INFINITY, f64::min);
            println!("fine-pruning: {} sweep points, min(asr - clean) = {worst:.4}", curve.len());
        }
        DefenseKind::Strip => {
            let probe_clean = test_set.take(args.probes);
            let overlays = test_set.take(512);
            let strip_cfg = defenses::StripConfig { n_overlays: args.n_overlays, seed };
            let clean_h = defenses::strip_entropy(&spec, &ckpt.weights, None, &probe_clean, &overlays, None, &strip_cfg)?;
            let poison_h = defenses::strip_entropy(&spec, &ckpt.weights, None, &probe_clean, &overlays, Some(&bank), &strip_cfg)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let report = serde_json::json!({
                "clean_entropies": clean_h,
                "poisoned_entropies": poison_h,
                "clean_mean": mean(&clean_h),
                "poisoned_mean": mean(&poison_h),
            });
            write_json(&args.out.join("strip.json"), &report)?;
            plot::histogram_pair(&clean_h, &poison_h, 24, &args.out.join("strip.png"))?;
            println!(
                "strip: clean mean {:.4}, poisoned mean {:.4}",
                mean(&clean_h),
                mean(&poison_h)
            );
        }
        DefenseKind::Neuralcleanse => {
            let nc_cfg = defenses::CleanseConfig {
                epochs: args.nc_epochs,
                subset: args.nc_subset,
                seed,
                ..Default::default()
            };
            let report = defenses::neural_cleanse(&spec, &ckpt.weights, None, &train_set, &nc_cfg)?;
            write_json(&args.out.join("neuralcleanse.json"), &report)?;
            for c in &report.per_class {
                let (h, w) = c.mask.dim();
                let mut img = image::GrayImage::new(w as u32, h as u32);
                for i in 0..h {
                    for j in 0..w {
                        img.put_pixel(j as u32, i as u32, image::Luma([(c.mask[(i, j)] * 255.0) as u8]));
                    }
                }
                img.save(args.out.join(format!("nc_mask_class{}.png", c.class)))?;
            }
            println!(
                "neural cleanse: anomaly index {:.3} ({})",
                report.anomaly_index,
                if report.flagged { "FLAGGED" } else { "passes" }
            );
        }
        DefenseKind::Gradcam => {
            let x = test_set.images.slice(ndarray::s![0..1, .., .., ..]).to_owned();
            let label = test_set.labels[0];
            let targets = vec![0usize];
            let poisoned = ribac_core::triggers::apply_trigger(&x, &bank, &targets)?;
            let clean_map = defenses::gradcam_heatmap(&spec, &ckpt.weights, None, &x, label)?;
            let poison_map = defenses::gradcam_heatmap(&spec, &ckpt.weights, None, &poisoned, 0)?;
            defenses::render_heatmap(&clean_map).save(args.out.join("gradcam_clean.png"))?;
            defenses::render_heatmap(&poison_map).save(args.out.join("gradcam_poisoned.png"))?;
            write_json(
                &args.out.join("gradcam.json"),
                &serde_json::json!({
                    "sample_label": label,
                    "clean_map_mean": clean_map.mean().unwrap_or(0.0),
                    "poisoned_map_mean": poison_map.mean().unwrap_or(0.0),
                }),
            )?;
            println!("attention heatmaps written for one clean/poisoned pair");
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ report

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub dataset: String,
    #[serde(default)]
    pub arch: Option<String>,
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    pub ratios: Vec<f64>,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: Option<String>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub epochs_step1: Option<usize>,
    #[serde(default)]
    pub epochs_step2: Option<usize>,
    #[serde(default)]
    pub lr_scores: Option<f64>,
    #[serde(default)]
    pub lr_triggers: Option<f64>,
    #[serde(default)]
    pub lr_weights: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub train_subset: Option<usize>,
    /// Pretraining epochs for the per-seed clean checkpoints.
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    #[serde(default)]
    pub pretrain_lr: Option<f64>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Suite description (TOML).
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Concurrent cells (cells share nothing mutable).
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

fn suite_cell_config(suite: &SuiteConfig, cr: f64, seed: u64) -> Result<ExperimentConfig> {
    let mut args = ConfigArgs::default();
    args.dataset = Some(suite.dataset.clone());
    args.arch = suite.arch.clone();
    args.data_root = suite.data_root.clone();
    args.cr = Some(cr);
    args.mode = suite.mode.clone();
    args.beta = suite.beta;
    args.epsilon = suite.epsilon;
    args.seed = Some(seed);
    args.epochs_step1 = suite.epochs_step1;
    args.epochs_step2 = suite.epochs_step2;
    args.lr_scores = suite.lr_scores;
    args.lr_triggers = suite.lr_triggers;
    args.lr_weights = suite.lr_weights;
    args.batch_size = suite.batch_size;
    args.train_subset = suite.train_subset;
    parse_config(&args, None)
}

pub fn report(args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.suite)
        .with_context(|| format!("reading suite {}", args.suite.display()))?;
    let suite: SuiteConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", args.suite.display()))?;
    std::fs::create_dir_all(&args.out)?;

    // One clean pretrain per seed, shared by every cell in that seed.
    let base = suite_cell_config(&suite, suite.ratios.first().copied().unwrap_or(2.0), 0)?;
    let spec = base.model_spec();
    let train_full = load_dataset(base.dataset, Split::Train, &base.data_root)?;
    let train = if base.train_subset > 0 { train_full.take(base.train_subset) } else { train_full.clone() };
    let test = load_dataset(base.dataset, Split::Test, &base.data_root)?;

    let mut pretrained: BTreeMap<u64, ModelWeights> = BTreeMap::new();
    for &seed in &suite.seeds {
        let pcfg = PretrainConfig {
            epochs: suite.pretrain_epochs.unwrap_or(10),
            batch_size: suite.batch_size.unwrap_or(128),
            lr: suite.pretrain_lr.unwrap_or(0.05),
            seed,
            ..Default::default()
        };
        let (model, hist) = pretrain_clean(&spec, &train_full, &test, &pcfg)?;
        println!(
            "pretrain seed {seed}: clean accuracy {:.4}",
            hist.last().map(|h| h.test_accuracy).unwrap_or(f64::NAN)
        );
        pretrained.insert(seed, model);
    }

    // Dense backdoored models are ratio-independent; share them across the
    // prune sweep of the backdoor-then-prune cells.
    let mut backdoored: BTreeMap<u64, (ModelWeights, ribac_core::triggers::TriggerBank)> = BTreeMap::new();
    if suite.methods.iter().any(|m| m == "b2p") {
        for &seed in &suite.seeds {
            let cfg = suite_cell_config(&suite, suite.ratios[0], seed)?;
            let (w, bank, _) = engine::baseline_backdoor_train(
                &spec,
                &pretrained[&seed],
                &train,
                None,
                &cfg.ribac(),
            )?;
            backdoored.insert(seed, (w, bank));
        }
    }

    struct Cell {
        method: String,
        cr: f64,
        seed: u64,
    }
    let cells: Vec<Cell> = suite
        .methods
        .iter()
        .flat_map(|m| {
            suite.ratios.iter().flat_map(move |&cr| {
                suite.seeds.iter().map(move |&seed| Cell { method: m.clone(), cr, seed })
            })
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.parallel.max(1))
        .build()?;
    let results: Vec<(String, std::result::Result<ResultRecord, String>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let name = format!("{}_{}x_s{}", cell.method, cell.cr, cell.seed);
                let run = || -> Result<ResultRecord> {
                    let cfg = suite_cell_config(&suite, cell.cr, cell.seed)?;
                    let rc = cfg.ribac();
                    let pre = &pretrained[&cell.seed];
                    let t0 = Instant::now();
                    let (clean, asr, cr) = match cell.method.as_str() {
                        "ribac" => {
                            let m = engine::run_ribac(&spec, pre, &train, &test, &rc)?;
                            let clean = clean_accuracy(&spec, &m.weights, None, &test)?;
                            let asr = attack_success_rate(&spec, &m.weights, None, &test, &m.bank, rc.mode, false)?;
                            (clean, asr, compression_ratio(&m.mask)?)
                        }
                        "p2b_random" | "p2b_clean" => {
                            let source = if cell.method == "p2b_random" {
                                P2bSource::RandomInit
                            } else {
                                P2bSource::CleanPretrained
                            };
                            let out = engine::pipeline_p_then_b(&spec, source, pre, &train, &test, &rc)?;
                            (out.clean_acc, out.asr, out.cr)
                        }
                        "b2p" => {
                            let (w, bank) = backdoored
                                .get(&cell.seed)
                                .expect("b2p cache populated")
                                .clone();
                            let prunable = spec.prunable_names();
                            let mask = ribac_core::sparsity::l1_global_mask(
                                &w.tensors,
                                &prunable,
                                rc.keep_fraction,
                            )?;
                            let mut weights = w;
                            weights.tensors = ribac_core::models::apply_mask(&weights.tensors, &mask);
                            let clean = clean_accuracy(&spec, &weights, Some(&mask), &test)?;
                            let asr = attack_success_rate(&spec, &weights, Some(&mask), &test, &bank, rc.mode, false)?;
                            (clean, asr, compression_ratio(&mask)?)
                        }
                        "l1_prune" => {
                            let out = engine::l1_prune_finetune(&spec, pre, &train, &test, &rc)?;
                            (out.clean_acc, out.asr, out.cr)
                        }
                        "score_prune" => {
                            let m = engine::prune_only(&spec, pre, &train, &test, &rc)?;
                            let clean = clean_accuracy(&spec, &m.weights, None, &test)?;
                            let asr = attack_success_rate(&spec, &m.weights, None, &test, &m.bank, rc.mode, false)?;
                            (clean, asr, compression_ratio(&m.mask)?)
                        }
                        "single_step" => {
                            let m = engine::train_single_step(&spec, pre, &train, &test, &rc)?;
                            let clean = clean_accuracy(&spec, &m.weights, None, &test)?;
                            let asr = attack_success_rate(&spec, &m.weights, None, &test, &m.bank, rc.mode, false)?;
                            (clean, asr, compression_ratio(&m.mask)?)
                        }
                        other => bail!("unknown suite method `{other}`"),
                    };
                    let mut cfg_for_record = cfg;
                    cfg_for_record.seed = cell.seed;
                    Ok(make_record(
                        &cfg_for_record,
                        Some(&cell.method),
                        clean,
                        asr,
                        cr,
                        t0.elapsed().as_secs_f64(),
                    ))
                };
                (name, run().map_err(|e| format!("{e:#}")))
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let cells_dir = args.out.join("cells");
    std::fs::create_dir_all(&cells_dir)?;
    for (name, result) in results {
        match result {
            Ok(record) => {
                let dir = cells_dir.join(&name);
                std::fs::create_dir_all(&dir)?;
                write_json(&dir.join("result.json"), &record)?;
                println!(
                    "{name}: clean {:.2} / asr {:.2}",
                    record.clean_acc * 100.0,
                    record.asr * 100.0
                );
                records.push(record);
            }
            Err(e) => {
                let dir = cells_dir.join(&name);
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("error.txt"), &e)?;
                eprintln!("cell {name} failed: {e}");
                failures.push(name);
            }
        }
    }

    std::fs::write(args.out.join("results.csv"), records_to_csv(&records)?)?;
    let table = render_table(&records);
    std::fs::write(args.out.join("table.txt"), &table)?;
    print!("{table}");

    // Mean/std per (method, ratio) over seeds.
    let mut agg = String::from("method,cr,n,clean_mean,clean_std,asr_mean,asr_std\n");
    let mut groups: BTreeMap<(String, i64), Vec<&ResultRecord>> = BTreeMap::new();
    for r in &records {
        groups
            .entry((r.method.clone().unwrap_or_default(), (r.cr * 100.0).round() as i64))
            .or_default()
            .push(r);
    }
    for ((method, cr100), rs) in groups {
        let n = rs.len() as f64;
        let mean = |f: &dyn Fn(&ResultRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        let std = |f: &dyn Fn(&ResultRecord) -> f64, mu: f64| {
            (rs.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / n).sqrt()
        };
        let cm = mean(&|r| r.clean_acc);
        let am = mean(&|r| r.asr);
        agg.push_str(&format!(
            "{method},{},{},{cm},{},{am},{}\n",
            cr100 as f64 / 100.0,
            rs.len(),
            std(&|r| r.clean_acc, cm),
            std(&|r| r.asr, am),
        ));
    }
    std::fs::write(args.out.join("summary.csv"), agg)?;

    if !failures.is_empty() {
        eprintln!("{} cell(s) failed: {}", failures.len(), failures.join(", "));
    }
    Ok(())
}

// ------------------------------------------------------------------ verify

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// result.json to compare against (defaults to the checkpoint's sibling).
    #[arg(long)]
    result: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
}

pub fn verify(args: VerifyArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut cfg = ckpt_config(&ckpt)?;
    if let Some(root) = &args.data_root {
        cfg.data_root = root.clone();
    }
    let spec = ckpt.spec;
    let test = load_split(&cfg, Split::Test)?;

    let clean = clean_accuracy(&spec, &ckpt.weights, None, &test)?;
    let mut recomputed: BTreeMap<String, f64> = BTreeMap::new();
    recomputed.insert("clean_acc".into(), clean);
    if let Some(bank) = &ckpt.triggers {
        let asr = attack_success_rate(&spec, &ckpt.weights, None, &test, bank, cfg.mode, false)?;
        recomputed.insert("asr".into(), asr);
    }
    if let Some(mask) = &ckpt.mask {
        recomputed.insert("cr".into(), compression_ratio(mask)?);
    }

    let mut mismatches = Vec::new();
    for (key, value) in &recomputed {
        if let Some(stored) = ckpt.metrics.get(key) {
            if stored != value {
                mismatches.push(format!("checkpoint {key}: stored {stored} recomputed {value}"));
            }
        }
    }
    let result_path = args
        .result
        .clone()
        .unwrap_or_else(|| args.ckpt.parent().unwrap_or(Path::new(".")).join("result.json"));
    if result_path.exists() {
        let record: ResultRecord = serde_json::from_str(&std::fs::read_to_string(&result_path)?)?;
        for (key, stored) in [
            ("clean_acc", record.clean_acc),
            ("asr", record.asr),
            ("cr", record.cr),
        ] {
            if let Some(value) = recomputed.get(key) {
                if *value != stored {
                    mismatches.push(format!("result.json {key}: stored {stored} recomputed {value}"));
                }
            }
        }
    }

    if mismatches.is_empty() {
        for (k, v) in &recomputed {
            println!("{k} = {v} (verified)");
        }
        Ok(())
    } else {
        Err(ribac_core::Error::VerifyMismatch(mismatches.join("; ")).into())
    }
}

// --------------------------------------------------------- export-triggers

#[derive(Args)]
pub struct ExportTriggersArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Amplification factor for visualization.
    #[arg(long, default_value_t = 10.0)]
    amplify: f64,
}

pub fn export_triggers(args: ExportTriggersArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let bank = ckpt
        .triggers
        .ok_or_else(|| anyhow!("checkpoint has no trigger bank"))?;
    std::fs::create_dir_all(&args.out)?;
    for (&class, pattern) in &bank.patterns {
        let img = render_amplified(pattern, args.amplify);
        let path = args.out.join(format!("trigger_class{class}.png"));
        img.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
