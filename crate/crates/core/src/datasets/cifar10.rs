//! CIFAR-10 binary-format loader.
//!
//! Expects the `cifar-10-batches-bin` layout: each file is a sequence of
//! 3073-byte records (1 label byte + 3072 channel-major pixel bytes).

use std::path::{Path, PathBuf};

use ndarray::Array4;

use super::{LabeledImageSet, Split};
use crate::error::{Error, Result};

const RECORD: usize = 1 + 3 * 32 * 32;

fn batch_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn load(root: &Path, split: Split) -> Result<LabeledImageSet> {
    let dir = batch_dir(root);
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };

    let mut records: Vec<(u8, Vec<u8>)> = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file).map_err(|e| Error::Ingestion {
            file: file.display().to_string(),
            reason: e.to_string(),
        })?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Ingestion {
                file: file.display().to_string(),
                reason: format!("length {} is not a multiple of {RECORD}", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(RECORD) {
            let label = rec[0];
            if label > 9 {
                return Err(Error::Ingestion {
                    file: file.display().to_string(),
                    reason: format!("label byte {label} out of range"),
                });
            }
            records.push((label, rec[1..].to_vec()));
        }
    }

    let n = records.len();
    let mut images = Array4::<f64>::zeros((n, 3, 32, 32));
    let mut labels = Vec::with_capacity(n);
    for (s, (label, pix)) in records.into_iter().enumerate() {
        labels.push(label as usize);
        // Stored channel-major (R plane, G plane, B plane), row-major planes.
        for ch in 0..3 {
            for i in 0..32 {
                for j in 0..32 {
                    images[(s, ch, i, j)] = pix[ch * 1024 + i * 32 + j] as f64 / 255.0;
                }
            }
        }
    }

    Ok(LabeledImageSet { images, labels, num_classes: 10, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fake_batch(dir: &Path, name: &str, n: usize) {
        let mut bytes = Vec::with_capacity(n * RECORD);
        for s in 0..n {
            bytes.push((s % 10) as u8);
            for k in 0..3072 {
                bytes.push(((s * 7 + k) % 256) as u8);
            }
        }
        let mut f = std::fs::File::create(dir.join(name)).unwrap();
        f.write_all(&bytes).unwrap();
    }

    #[test]
    fn parses_the_binary_record_layout() {
        let tmp = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            write_fake_batch(tmp.path(), &format!("data_batch_{i}.bin"), 4);
        }
        let set = load(tmp.path(), Split::Train).unwrap();
        assert_eq!(set.len(), 20);
        assert_eq!(set.labels[3], 3);
        // First pixel of sample 0 is byte value 0 -> 0.0; channel plane order.
        assert_eq!(set.images[(0, 0, 0, 0)], 0.0);
        assert!((set.images[(0, 1, 0, 0)] - (1024 % 256) as f64 / 255.0).abs() < 1e-12);
        set.validate().unwrap();
    }

    #[test]
    fn normalization_round_trips_to_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        write_fake_batch(tmp.path(), "test_batch.bin", 2);
        let set = load(tmp.path(), Split::Test).unwrap();
        for (k, &v) in set.images.iter().enumerate() {
            let byte = (v * 255.0).round();
            assert!((byte / 255.0 - v).abs() < 1e-6, "pixel {k} does not round trip");
        }
    }

    #[test]
    fn truncated_file_names_the_culprit() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("test_batch.bin"), [1u8, 2, 3]).unwrap();
        let err = load(tmp.path(), Split::Test).unwrap_err();
        match err {
            Error::Ingestion { file, .. } => assert!(file.contains("test_batch.bin")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_root_reports_missing_file() {
        let err = load(Path::new("/nonexistent-ribac-data"), Split::Test).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
    }
}
