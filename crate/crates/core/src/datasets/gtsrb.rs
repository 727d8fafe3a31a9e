//! GTSRB loader (standard on-disk layout, PPM images), resized to 32x32.

use std::path::{Path, PathBuf};

use ndarray::Array4;

use super::imgutil::decode_resize;
use super::{LabeledImageSet, Split};
use crate::error::{Error, Result};

const CLASSES: usize = 43;
const SIDE: usize = 32;

fn base_dir(root: &Path) -> PathBuf {
    let nested = root.join("GTSRB");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn load(root: &Path, split: Split) -> Result<LabeledImageSet> {
    let base = base_dir(root);
    let mut entries: Vec<(PathBuf, usize)> = Vec::new();

    match split {
        Split::Train => {
            let images = base.join("Final_Training").join("Images");
            for class in 0..CLASSES {
                let dir = images.join(format!("{class:05}"));
                let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                    .map_err(|e| Error::Ingestion {
                        file: dir.display().to_string(),
                        reason: e.to_string(),
                    })?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
                    .collect();
                files.sort();
                entries.extend(files.into_iter().map(|p| (p, class)));
            }
        }
        Split::Test => {
            let images = base.join("Final_Test").join("Images");
            let csv_path = images.join("GT-final_test.csv");
            let content = std::fs::read_to_string(&csv_path).map_err(|e| Error::Ingestion {
                file: csv_path.display().to_string(),
                reason: e.to_string(),
            })?;
            // Semicolon-separated: Filename;Width;...;ClassId
            for (ln, line) in content.lines().enumerate().skip(1) {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(';').collect();
                let (Some(file), Some(class)) = (fields.first(), fields.last()) else {
                    continue;
                };
                let class: usize = class.trim().parse().map_err(|_| Error::Ingestion {
                    file: csv_path.display().to_string(),
                    reason: format!("bad ClassId on line {}", ln + 1),
                })?;
                entries.push((images.join(file), class));
            }
            entries.sort();
        }
    }

    let n = entries.len();
    if n == 0 {
        return Err(Error::Ingestion {
            file: base.display().to_string(),
            reason: "no images found".into(),
        });
    }
    let mut images = Array4::<f64>::zeros((n, 3, SIDE, SIDE));
    let mut labels = Vec::with_capacity(n);
    for (s, (path, class)) in entries.iter().enumerate() {
        let pix = decode_resize(path, SIDE, SIDE)?;
        images
            .index_axis_mut(ndarray::Axis(0), s)
            .assign(&ndarray::ArrayView::from_shape((3, SIDE, SIDE), &pix).unwrap());
        labels.push(*class);
    }

    Ok(LabeledImageSet { images, labels, num_classes: CLASSES, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_ppm(path: &Path, side: u32, level: u8) {
        let img = RgbImage::from_pixel(side, side, Rgb([level, level / 2, level / 3]));
        img.save(path).unwrap();
    }

    #[test]
    fn loads_training_layout_and_resizes() {
        let tmp = tempfile::tempdir().unwrap();
        for class in 0..CLASSES {
            let dir = tmp
                .path()
                .join("GTSRB")
                .join("Final_Training")
                .join("Images")
                .join(format!("{class:05}"));
            std::fs::create_dir_all(&dir).unwrap();
            if class < 2 {
                write_ppm(&dir.join("00000_00000.ppm"), 48, 200);
            }
        }
        let set = load(tmp.path(), Split::Train).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.images.dim(), (2, 3, 32, 32));
        assert_eq!(set.labels, vec![0, 1]);
        assert!((set.images[(0, 0, 0, 0)] - 200.0 / 255.0).abs() < 1e-6);
        set.validate().unwrap();
    }

    #[test]
    fn loads_test_annotations() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("Final_Test").join("Images");
        std::fs::create_dir_all(&dir).unwrap();
        write_ppm(&dir.join("00000.ppm"), 20, 90);
        write_ppm(&dir.join("00001.ppm"), 20, 45);
        std::fs::write(
            dir.join("GT-final_test.csv"),
            "Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\n\
             00000.ppm;20;20;0;0;20;20;5\n\
             00001.ppm;20;20;0;0;20;20;12\n",
        )
        .unwrap();
        let set = load(tmp.path(), Split::Test).unwrap();
        assert_eq!(set.labels, vec![5, 12]);
    }

    #[test]
    fn missing_layout_is_an_ingestion_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load(tmp.path(), Split::Train), Err(Error::Ingestion { .. })));
    }
}
