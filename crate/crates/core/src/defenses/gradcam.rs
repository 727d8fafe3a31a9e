//! Gradient-weighted class activation heatmaps from the last convolution
//! layer.

use ndarray::{Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::models::{apply_mask, ModelSpec, ModelWeights};
use crate::nn;
use crate::sparsity::PruneMask;

/// Bilinear resize of a single-channel map.
fn upsample_bilinear(map: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if h == oh && w == ow {
        return map.clone();
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            // Align corners = false convention.
            let src_y = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
            let src_x = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let y0 = src_y.floor() as usize;
            let x0 = src_x.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = src_y - y0 as f64;
            let fx = src_x - x0 as f64;
            out[(i, j)] = map[(y0, x0)] * (1.0 - fy) * (1.0 - fx)
                + map[(y0, x1)] * (1.0 - fy) * fx
                + map[(y1, x0)] * fy * (1.0 - fx)
                + map[(y1, x1)] * fy * fx;
        }
    }
    out
}

/// Attention heatmap for one image: channel weights are the spatially pooled
/// gradients of the class logit at the last conv layer; the weighted
/// positive activation sum is upsampled to input size and min-max
/// normalized into [0,1] (all zeros when the raw map is constant).
pub fn gradcam_heatmap(
    spec: &ModelSpec,
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    image: &Array4<f64>,
    class_id: usize,
) -> Result<Array2<f64>> {
    if class_id >= spec.num_classes {
        return Err(Error::InvalidConfig(format!(
            "class {class_id} out of range for {} classes",
            spec.num_classes
        )));
    }
    if image.dim().0 != 1 {
        return Err(Error::ShapeMismatch("heatmaps are computed one image at a time".into()));
    }
    let net = spec.network();
    let node = net
        .last_conv_node()
        .ok_or_else(|| Error::InvalidConfig("model has no convolution layers".into()))?;
    let effective = match mask {
        Some(m) => apply_mask(&weights.tensors, m),
        None => weights.tensors.clone(),
    };

    let trace = nn::forward(&net, &effective, image, &nn::ForwardOpts::default())?;
    let logits = trace.logits();
    // Seed backward with d(logit_class)/dlogits.
    let mut dlogits = Array2::<f64>::zeros(logits.dim());
    dlogits[(0, class_id)] = 1.0;
    let bwd = nn::backward(&net, &effective, &trace, &dlogits, false, Some(node))?;
    let dacts = bwd
        .probe_grad
        .ok_or_else(|| Error::InvalidConfig("no gradient reached the last conv layer".into()))?;
    let acts = trace.acts[node].image();

    let (_, c, h, w) = acts.dim();
    let mut cam = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        let weight = dacts.index_axis(Axis(0), 0).index_axis(Axis(0), ci).mean().unwrap();
        let a = acts.index_axis(Axis(0), 0);
        let a = a.index_axis(Axis(0), ci);
        ndarray::Zip::from(&mut cam).and(&a).for_each(|c, &v| *c += weight * v);
    }
    cam.mapv_inplace(|v| v.max(0.0));

    let (ih, iw, _) = spec.input_shape;
    let mut up = upsample_bilinear(&cam, ih, iw);
    let min = up.fold(f64::INFINITY, |a, &b| a.min(b));
    let max = up.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max - min < 1e-12 {
        up.fill(0.0);
    } else {
        up.mapv_inplace(|v| (v - min) / (max - min));
    }
    Ok(up)
}

/// Render a heatmap as a grayscale PNG-ready image.
pub fn render_heatmap(map: &Array2<f64>) -> image::GrayImage {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            img.put_pixel(j as u32, i as u32, image::Luma([(map[(i, j)] * 255.0).round() as u8]));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_preserves_constant_maps() {
        let m = Array2::from_elem((4, 4), 0.7);
        let up = upsample_bilinear(&m, 32, 32);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn upsample_is_monotone_on_a_gradient() {
        let m = Array2::from_shape_fn((2, 2), |(i, _)| i as f64);
        let up = upsample_bilinear(&m, 8, 8);
        assert!(up[(0, 0)] < up[(7, 0)]);
    }
}
