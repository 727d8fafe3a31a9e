//! Metrics and result tables.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledImageSet, TargetMode};
use crate::error::{Error, Result};
use crate::models::{forward_batched, ModelSpec, ModelWeights};
use crate::nn::loss::argmax_rows;
use crate::sparsity::PruneMask;
use crate::triggers::{apply_trigger, TriggerBank};

const EVAL_CHUNK: usize = 256;

/// One experiment outcome. `method` distinguishes suite cells (joint
/// training vs the sequential baselines); single-run outputs leave it unset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultRecord {
    pub clean_acc: f64,
    pub asr: f64,
    pub cr: f64,
    pub mode: String,
    pub arch: String,
    pub dataset: String,
    pub seed: u64,
    pub beta: f64,
    pub epsilon: f64,
    pub git_rev: String,
    pub wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<String>,
}

impl ResultRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.clean_acc) || !(0.0..=1.0).contains(&self.asr) {
            return Err(Error::InvalidConfig(format!(
                "rates out of [0,1]: clean={} asr={}",
                self.clean_acc, self.asr
            )));
        }
        if self.cr < 1.0 {
            return Err(Error::InvalidConfig(format!("compression ratio {} < 1", self.cr)));
        }
        Ok(())
    }
}

/// Fraction of test samples whose argmax prediction equals the label.
pub fn clean_accuracy(
    spec: &ModelSpec,
    model: &ModelWeights,
    mask: Option<&PruneMask>,
    testset: &LabeledImageSet,
) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = forward_batched(spec, model, mask, &testset.images, EVAL_CHUNK)?;
    let preds = argmax_rows(&logits.view());
    let hits = preds.iter().zip(&testset.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / testset.len() as f64)
}

/// Fraction of trigger-stamped test samples classified as their attack
/// target. `exclude_target` drops samples whose true label already equals
/// the target (off by default).
pub fn attack_success_rate(
    spec: &ModelSpec,
    model: &ModelWeights,
    mask: Option<&PruneMask>,
    testset: &LabeledImageSet,
    bank: &TriggerBank,
    mode: TargetMode,
    exclude_target: bool,
) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets = crate::datasets::make_targets(&testset.labels, mode, testset.num_classes)?;
    let poisoned = apply_trigger(&testset.images, bank, &targets.targets)?;
    let logits = forward_batched(spec, model, mask, &poisoned, EVAL_CHUNK)?;
    let preds = argmax_rows(&logits.view());

    let mut hits = 0usize;
    let mut total = 0usize;
    for ((&p, &t), &y) in preds.iter().zip(&targets.targets).zip(&testset.labels) {
        if exclude_target && y == t {
            continue;
        }
        total += 1;
        if p == t {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(hits as f64 / total as f64)
}

fn fmt_cr(cr: f64) -> String {
    if (cr - cr.round()).abs() < 1e-9 {
        format!("{}x", cr.round() as i64)
    } else {
        format!("{cr:.2}x")
    }
}

/// Render records as a text table: one block per (arch, dataset), rows
/// grouped by compression ratio, methods as columns, cells
/// "clean / asr" in percent with two decimals. Multiple records in a cell
/// are averaged.
pub fn render_table(records: &[ResultRecord]) -> String {
    let mut blocks: IndexMap<(String, String), Vec<&ResultRecord>> = IndexMap::new();
    for r in records {
        blocks.entry((r.arch.clone(), r.dataset.clone())).or_default().push(r);
    }

    let mut out = String::new();
    for ((arch, dataset), rows) in blocks {
        let mut methods: Vec<String> = Vec::new();
        for r in &rows {
            let m = r.method.clone().unwrap_or_else(|| "ribac".into());
            if !methods.contains(&m) {
                methods.push(m);
            }
        }
        let mut ratios: Vec<i64> = rows.iter().map(|r| (r.cr * 100.0).round() as i64).collect();
        ratios.sort_unstable();
        ratios.dedup();

        let _ = writeln!(out, "{arch} on {dataset}");
        let mut header = format!("{:<8}", "C.R.");
        for m in &methods {
            let _ = write!(header, "{m:<18}");
        }
        let _ = writeln!(out, "{}", header.trim_end());
        for ratio in ratios {
            let cr = ratio as f64 / 100.0;
            let mut line = format!("{:<8}", fmt_cr(cr));
            for m in &methods {
                let cell: Vec<&&ResultRecord> = rows
                    .iter()
                    .filter(|r| {
                        ((r.cr * 100.0).round() as i64) == ratio
                            && r.method.clone().unwrap_or_else(|| "ribac".into()) == *m
                    })
                    .collect();
                if cell.is_empty() {
                    let _ = write!(line, "{:<18}", "-");
                } else {
                    let n = cell.len() as f64;
                    let acc: f64 = cell.iter().map(|r| r.clean_acc).sum::<f64>() / n;
                    let asr: f64 = cell.iter().map(|r| r.asr).sum::<f64>() / n;
                    let _ = write!(line, "{:<18}", format!("{:.2} / {:.2}", acc * 100.0, asr * 100.0));
                }
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }
        let _ = writeln!(out);
    }
    out
}

/// CSV round trip for result records.
pub fn records_to_csv(records: &[ResultRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf8"))
}

pub fn records_from_csv(text: &str) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(|e| Error::InvalidConfig(e.to_string())))
        .collect()
}
