//! Versioned checkpoint archive.
//!
//! Layout: magic string, little-endian u64 header length, JSON header, raw
//! payload. Weight and trigger tensors are stored as little-endian f64;
//! masks are bit-packed (LSB first within each byte) with their keep
//! fraction in the header.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::datasets::TargetMode;
use crate::error::{Error, Result};
use crate::models::{ModelSpec, ModelWeights, Provenance};
use crate::sparsity::PruneMask;
use crate::triggers::TriggerBank;

pub const MAGIC: &[u8] = b"RIBAC-CKPT-v1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String, // "f64" | "bits"
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MaskMeta {
    keep_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TriggerMeta {
    epsilon: f64,
    mode: TargetMode,
    classes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    provenance: Provenance,
    seed: u64,
    metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    config: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    mask: Option<MaskMeta>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    triggers: Option<TriggerMeta>,
    tensors: Vec<TensorMeta>,
}

/// Everything one training run needs to be re-evaluated later.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub weights: ModelWeights,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub config: Option<serde_json::Value>,
    pub mask: Option<PruneMask>,
    pub triggers: Option<TriggerBank>,
}

fn pack_bits(t: &ArrayD<f64>) -> Vec<u8> {
    let mut bytes = vec![0u8; t.len().div_ceil(8)];
    for (i, &v) in t.iter().enumerate() {
        debug_assert!(v == 0.0 || v == 1.0, "mask entries must be binary");
        if v == 1.0 {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

fn unpack_bits(bytes: &[u8], shape: &[usize]) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Checkpoint(format!(
            "bit payload of {} bytes for {n} entries",
            bytes.len()
        )));
    }
    let vals: Vec<f64> = (0..n)
        .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { 0.0 })
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), vals).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn f64_bytes(t: &ArrayD<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for &v in t.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn f64_from_bytes(bytes: &[u8], shape: &[usize]) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Checkpoint(format!(
            "f64 payload of {} bytes for {n} entries",
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), vals).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();

        let push = |name: String, shape: Vec<usize>, dtype: &str, bytes: Vec<u8>, payload: &mut Vec<u8>, tensors: &mut Vec<TensorMeta>| {
            tensors.push(TensorMeta {
                name,
                shape,
                dtype: dtype.into(),
                offset: payload.len() as u64,
                byte_len: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        };

        for (name, t) in &self.weights.tensors {
            push(
                format!("weights.{name}"),
                t.shape().to_vec(),
                "f64",
                f64_bytes(t),
                &mut payload,
                &mut tensors,
            );
        }
        if let Some(mask) = &self.mask {
            for (name, t) in &mask.tensors {
                push(
                    format!("mask.{name}"),
                    t.shape().to_vec(),
                    "bits",
                    pack_bits(t),
                    &mut payload,
                    &mut tensors,
                );
            }
        }
        if let Some(bank) = &self.triggers {
            for (&class, p) in &bank.patterns {
                push(
                    format!("trigger.{class}"),
                    p.shape().to_vec(),
                    "f64",
                    f64_bytes(&p.clone().into_dyn()),
                    &mut payload,
                    &mut tensors,
                );
            }
        }

        let header = Header {
            spec: self.spec,
            provenance: self.weights.provenance,
            seed: self.seed,
            metrics: self.metrics.clone(),
            config: self.config.clone(),
            mask: self.mask.as_ref().map(|m| MaskMeta { keep_fraction: m.keep_fraction }),
            triggers: self.triggers.as_ref().map(|b| TriggerMeta {
                epsilon: b.epsilon,
                mode: b.mode,
                classes: b.patterns.keys().copied().collect(),
            }),
            tensors,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = vec![0u8; MAGIC.len()];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint(format!("{}: too short", path.display())))?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic, not a checkpoint",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        f.read_exact(&mut header_json)?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;

        let read_tensor = |meta: &TensorMeta| -> Result<ArrayD<f64>> {
            let lo = meta.offset as usize;
            let hi = lo + meta.byte_len as usize;
            let bytes = payload
                .get(lo..hi)
                .ok_or_else(|| Error::Checkpoint(format!("`{}` out of bounds", meta.name)))?;
            match meta.dtype.as_str() {
                "f64" => f64_from_bytes(bytes, &meta.shape),
                "bits" => unpack_bits(bytes, &meta.shape),
                other => Err(Error::Checkpoint(format!("unknown dtype {other}"))),
            }
        };

        let mut weights = IndexMap::new();
        let mut mask_tensors = IndexMap::new();
        let mut trigger_patterns: IndexMap<usize, Array3<f64>> = IndexMap::new();
        for meta in &header.tensors {
            let t = read_tensor(meta)?;
            if let Some(name) = meta.name.strip_prefix("weights.") {
                weights.insert(name.to_string(), t);
            } else if let Some(name) = meta.name.strip_prefix("mask.") {
                mask_tensors.insert(name.to_string(), t);
            } else if let Some(class) = meta.name.strip_prefix("trigger.") {
                let class: usize = class
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad trigger name {}", meta.name)))?;
                trigger_patterns.insert(
                    class,
                    t.into_dimensionality::<ndarray::Ix3>()
                        .map_err(|e| Error::Checkpoint(e.to_string()))?,
                );
            }
        }

        let mask = header.mask.map(|m| PruneMask {
            tensors: mask_tensors,
            keep_fraction: m.keep_fraction,
        });
        let triggers = header.triggers.map(|t| TriggerBank {
            epsilon: t.epsilon,
            mode: t.mode,
            patterns: trigger_patterns,
        });

        Ok(Checkpoint {
            spec: header.spec,
            weights: ModelWeights { tensors: weights, provenance: header.provenance },
            seed: header.seed,
            metrics: header.metrics,
            config: header.config,
            mask,
            triggers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Arch};
    use crate::sparsity::{generate_mask, score_init};
    use crate::triggers::init_triggers;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let spec = ModelSpec::new(Arch::DeskCnn, 3, (32, 32, 3));
        let model = build_model(&spec, 5);
        let prunable = spec.prunable_names();
        let scores = score_init(&model.tensors, &prunable);
        let mask = generate_mask(&scores, 0.25).unwrap();
        let bank = init_triggers((3, 32, 32), TargetMode::AllToOne, 3, 4.0 / 255.0, 5).unwrap();
        let mut metrics = BTreeMap::new();
        metrics.insert("clean_acc".to_string(), 0.93);

        let ckpt = Checkpoint {
            spec,
            weights: model.clone(),
            seed: 5,
            metrics,
            config: Some(serde_json::json!({"cr": 4})),
            mask: Some(mask.clone()),
            triggers: Some(bank.clone()),
        };
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        ckpt.save(&path).unwrap();

        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.weights.checksum(), model.checksum());
        assert_eq!(back.weights.provenance, Provenance::RandomInit);
        let m = back.mask.unwrap();
        assert_eq!(m.keep_fraction, 0.25);
        assert_eq!(m.tensors, mask.tensors);
        let b = back.triggers.unwrap();
        assert_eq!(b.epsilon, bank.epsilon);
        assert_eq!(b.patterns, bank.patterns);
        assert_eq!(back.metrics["clean_acc"], 0.93);
    }

    #[test]
    fn magic_is_checked() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_starts_with_magic_string() {
        let spec = ModelSpec::new(Arch::DeskCnn, 3, (32, 32, 3));
        let ckpt = Checkpoint {
            spec,
            weights: build_model(&spec, 0),
            seed: 0,
            metrics: BTreeMap::new(),
            config: None,
            mask: None,
            triggers: None,
        };
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(MAGIC));
    }
}
