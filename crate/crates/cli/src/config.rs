//! Experiment configuration: optional TOML file, CLI flags override,
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ribac_core::datasets::{DatasetId, TargetMode};
use ribac_core::engine::RibacConfig;
use ribac_core::models::{Arch, ModelSpec};
use ribac_core::sparsity::ScoreInit;
use serde::{Deserialize, Serialize};

/// File-level experiment description. Every field is optional in the file;
/// CLI flags override file values; whatever remains unset falls back to the
/// documented defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<String>,
    pub arch: Option<String>,
    pub data_root: Option<PathBuf>,
    pub cr: Option<f64>,
    pub mode: Option<String>,
    pub beta: Option<f64>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub epochs_step1: Option<usize>,
    pub epochs_step2: Option<usize>,
    pub lr_scores: Option<f64>,
    pub lr_triggers: Option<f64>,
    pub lr_weights: Option<f64>,
    pub batch_size: Option<usize>,
    pub score_init: Option<String>,
    pub train_subset: Option<usize>,
}

/// Fully resolved experiment configuration; serialized verbatim into every
/// output artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    pub arch: Arch,
    pub data_root: PathBuf,
    pub cr: f64,
    pub mode: TargetMode,
    pub beta: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub lr_scores: f64,
    pub lr_triggers: f64,
    pub lr_weights: f64,
    pub batch_size: usize,
    pub score_init: ScoreInit,
    /// Optional cap on training samples (CI-scale runs); 0 = full set.
    pub train_subset: usize,
}

/// CLI-side overrides; `None` means "not given on the command line".
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub arch: Option<String>,
    /// Dataset root (falls back to $RIBAC_DATA_ROOT, then ".").
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Compression ratio (keep fraction is its reciprocal).
    #[arg(long)]
    pub cr: Option<f64>,
    /// Target scheme: all2one | all2all.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Trigger L-infinity budget in pixel units (e.g. 0.0157 = 4/255).
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs_step1: Option<usize>,
    #[arg(long)]
    pub epochs_step2: Option<usize>,
    #[arg(long)]
    pub lr_scores: Option<f64>,
    #[arg(long)]
    pub lr_triggers: Option<f64>,
    #[arg(long)]
    pub lr_weights: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Score initialization: abs | signed.
    #[arg(long)]
    pub score_init: Option<String>,
    /// Cap on training samples (0 = full set).
    #[arg(long)]
    pub train_subset: Option<usize>,
}

pub fn parse_mode(s: &str) -> Result<TargetMode> {
    match s {
        "all2one" | "all_to_one" => Ok(TargetMode::AllToOne),
        "all2all" | "all_to_all" => Ok(TargetMode::AllToAll),
        other => bail!("unknown mode `{other}` (expected all2one or all2all)"),
    }
}

pub fn parse_score_init(s: &str) -> Result<ScoreInit> {
    match s {
        "abs" => Ok(ScoreInit::Abs),
        "signed" => Ok(ScoreInit::Signed),
        other => bail!("unknown score-init `{other}` (expected abs or signed)"),
    }
}

pub fn data_root_fallback() -> PathBuf {
    std::env::var_os("RIBAC_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Merge file + CLI into a resolved config. CLI wins; unknown file keys are
/// rejected with the exact key name (via serde).
pub fn parse_config(args: &ConfigArgs, file: Option<&Path>) -> Result<ExperimentConfig> {
    let file_cfg: FileConfig = match file.or(args.config.as_deref()) {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FileConfig::default(),
    };

    let dataset_name = args
        .dataset
        .clone()
        .or(file_cfg.dataset)
        .unwrap_or_else(|| "desk_synth".into());
    let dataset = DatasetId::parse(&dataset_name)?;
    let arch_name = args.arch.clone().or(file_cfg.arch).unwrap_or_else(|| {
        match dataset {
            DatasetId::DeskSynth => "desk_cnn",
            DatasetId::TinyImagenet => "resnet18",
            _ => "preact_resnet18",
        }
        .into()
    });
    let arch = Arch::parse(&arch_name)?;

    let cr = args.cr.or(file_cfg.cr).unwrap_or(4.0);
    if cr < 1.0 {
        bail!("compression ratio {cr} must be >= 1");
    }
    let mode = match args.mode.clone().or(file_cfg.mode) {
        Some(m) => parse_mode(&m)?,
        None => TargetMode::AllToOne,
    };
    let score_init = match args.score_init.clone().or(file_cfg.score_init) {
        Some(s) => parse_score_init(&s)?,
        None => ScoreInit::Abs,
    };

    Ok(ExperimentConfig {
        dataset,
        arch,
        data_root: args
            .data_root
            .clone()
            .or(file_cfg.data_root)
            .unwrap_or_else(data_root_fallback),
        cr,
        mode,
        beta: args.beta.or(file_cfg.beta).unwrap_or(1.0),
        epsilon: args.epsilon.or(file_cfg.epsilon).unwrap_or(4.0 / 255.0),
        seed: args.seed.or(file_cfg.seed).unwrap_or(0),
        epochs_step1: args.epochs_step1.or(file_cfg.epochs_step1).unwrap_or(30),
        epochs_step2: args.epochs_step2.or(file_cfg.epochs_step2).unwrap_or(30),
        lr_scores: args.lr_scores.or(file_cfg.lr_scores).unwrap_or(3e-4),
        lr_triggers: args.lr_triggers.or(file_cfg.lr_triggers).unwrap_or(3e-4),
        lr_weights: args.lr_weights.or(file_cfg.lr_weights).unwrap_or(3e-4),
        batch_size: args.batch_size.or(file_cfg.batch_size).unwrap_or(128),
        score_init,
        train_subset: args.train_subset.or(file_cfg.train_subset).unwrap_or(0),
    })
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> ModelSpec {
        let (h, w, c) = self.dataset.image_shape();
        ModelSpec::new(self.arch, self.dataset.num_classes(), (h, w, c))
    }

    pub fn ribac(&self) -> RibacConfig {
        RibacConfig {
            beta: self.beta,
            epsilon: self.epsilon,
            keep_fraction: 1.0 / self.cr,
            epochs_step1: self.epochs_step1,
            epochs_step2: self.epochs_step2,
            lr_scores: self.lr_scores,
            lr_triggers: self.lr_triggers,
            lr_weights: self.lr_weights,
            batch_size: self.batch_size,
            mode: self.mode,
            seed: self.seed,
            score_init: self.score_init,
        }
    }
}
