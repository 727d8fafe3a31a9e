//! Shared image decode / resize helper for file-based datasets.

use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};

/// Decode an image file, bilinearly resize to (h, w), return channel-first
/// RGB pixels in [0,1].
pub fn decode_resize(path: &Path, h: usize, w: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        file: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let img = img.resize_exact(w as u32, h as u32, FilterType::Triangle).to_rgb8();
    let mut out = vec![0.0; 3 * h * w];
    for (j, i, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[ch * h * w + i as usize * w + j as usize] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}
