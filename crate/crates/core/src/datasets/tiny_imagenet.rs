//! Tiny ImageNet loader (tiny-imagenet-200 layout), 64x64 RGB.
//!
//! Class ids follow the line order of `wnids.txt`. The `val` split serves as
//! the test split, labeled via `val_annotations.txt`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array4;

use super::imgutil::decode_resize;
use super::{LabeledImageSet, Split};
use crate::error::{Error, Result};

const SIDE: usize = 64;

fn base_dir(root: &Path) -> PathBuf {
    let nested = root.join("tiny-imagenet-200");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn load(root: &Path, split: Split) -> Result<LabeledImageSet> {
    let base = base_dir(root);
    let wnids_path = base.join("wnids.txt");
    let wnids = std::fs::read_to_string(&wnids_path).map_err(|e| Error::Ingestion {
        file: wnids_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let class_of: HashMap<String, usize> = wnids
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, w)| (w, i))
        .collect();
    let num_classes = class_of.len();

    let mut entries: Vec<(PathBuf, usize)> = Vec::new();
    match split {
        Split::Train => {
            let mut wnid_list: Vec<(&String, &usize)> = class_of.iter().collect();
            wnid_list.sort_by_key(|(_, &c)| c);
            for (wnid, &class) in wnid_list {
                let dir = base.join("train").join(wnid).join("images");
                let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                    .map_err(|e| Error::Ingestion {
                        file: dir.display().to_string(),
                        reason: e.to_string(),
                    })?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                files.sort();
                entries.extend(files.into_iter().map(|p| (p, class)));
            }
        }
        Split::Test => {
            let ann_path = base.join("val").join("val_annotations.txt");
            let ann = std::fs::read_to_string(&ann_path).map_err(|e| Error::Ingestion {
                file: ann_path.display().to_string(),
                reason: e.to_string(),
            })?;
            for line in ann.lines() {
                let mut it = line.split_whitespace();
                let (Some(file), Some(wnid)) = (it.next(), it.next()) else { continue };
                let class = *class_of.get(wnid).ok_or_else(|| Error::Ingestion {
                    file: ann_path.display().to_string(),
                    reason: format!("unknown wnid {wnid}"),
                })?;
                entries.push((base.join("val").join("images").join(file), class));
            }
            entries.sort();
        }
    }

    if entries.is_empty() {
        return Err(Error::Ingestion {
            file: base.display().to_string(),
            reason: "no images found".into(),
        });
    }
    let n = entries.len();
    let mut images = Array4::<f64>::zeros((n, 3, SIDE, SIDE));
    let mut labels = Vec::with_capacity(n);
    for (s, (path, class)) in entries.iter().enumerate() {
        let pix = decode_resize(path, SIDE, SIDE)?;
        images
            .index_axis_mut(ndarray::Axis(0), s)
            .assign(&ndarray::ArrayView::from_shape((3, SIDE, SIDE), &pix).unwrap());
        labels.push(*class);
    }

    Ok(LabeledImageSet { images, labels, num_classes, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn loads_train_and_val_layouts() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path().join("tiny-imagenet-200");
        std::fs::create_dir_all(&base).unwrap();
        std::fs::write(base.join("wnids.txt"), "n001\nn002\n").unwrap();
        for (wnid, level) in [("n001", 10u8), ("n002", 250u8)] {
            let dir = base.join("train").join(wnid).join("images");
            std::fs::create_dir_all(&dir).unwrap();
            RgbImage::from_pixel(64, 64, Rgb([level, level, level]))
                .save(dir.join(format!("{wnid}_0.JPEG")))
                .unwrap();
        }
        let val = base.join("val").join("images");
        std::fs::create_dir_all(&val).unwrap();
        RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]))
            .save(val.join("val_0.JPEG"))
            .unwrap();
        std::fs::write(
            base.join("val").join("val_annotations.txt"),
            "val_0.JPEG\tn002\t0\t0\t10\t10\n",
        )
        .unwrap();

        let train = load(tmp.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train.labels, vec![0, 1]);
        assert_eq!(train.images.dim(), (2, 3, 64, 64));

        let test = load(tmp.path(), Split::Test).unwrap();
        assert_eq!(test.labels, vec![1]);
        test.validate().unwrap();
    }
}
