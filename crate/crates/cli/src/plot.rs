//! Minimal PNG figure rendering for defense reports: polyline charts and
//! histograms on a white canvas. Not a plotting library, just enough to
//! eyeball sweep curves and entropy distributions.

use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: u32 = 48;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: Rgb<u8>,
    pub points: Vec<(f64, f64)>,
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as u32).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * t).round() as i64;
        let y = (y0 + (y1 - y0) * t).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Line chart over [x_min, x_max] x [0, 1].
pub fn line_chart(series: &[Series], path: &std::path::Path) -> anyhow::Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x_min, x_max) = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = (x_max - x_min).max(1e-9);
    let to_px = |x: f64, y: f64| {
        let px = MARGIN as f64 + (x - x_min) / span * (W - 2 * MARGIN) as f64;
        let py = (H - MARGIN) as f64 - y.clamp(0.0, 1.0) * (H - 2 * MARGIN) as f64;
        (px, py)
    };
    // Axes.
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, MARGIN as f64, (H - MARGIN) as f64, (W - MARGIN) as f64, (H - MARGIN) as f64, black);
    draw_line(&mut img, MARGIN as f64, MARGIN as f64, MARGIN as f64, (H - MARGIN) as f64, black);
    for (si, s) in series.iter().enumerate() {
        for pair in s.points.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            draw_line(&mut img, x0, y0, x1, y1, s.color);
        }
        // Legend swatch.
        let ly = MARGIN / 2 + 10 * si as u32;
        for dx in 0..24 {
            img.put_pixel(MARGIN + dx, ly, s.color);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Two overlaid histograms over a shared range, heights normalized.
pub fn histogram_pair(
    a: &[f64],
    b: &[f64],
    bins: usize,
    path: &std::path::Path,
) -> anyhow::Result<()> {
    let all: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let count = |xs: &[f64]| {
        let mut c = vec![0usize; bins];
        for &x in xs {
            let b = (((x - lo) / span) * bins as f64).floor() as usize;
            c[b.min(bins - 1)] += 1;
        }
        c
    };
    let ca = count(a);
    let cb = count(b);
    let max = ca.iter().chain(cb.iter()).copied().max().unwrap_or(1).max(1) as f64;

    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let bar_w = (W - 2 * MARGIN) / bins as u32;
    for (bi, (&na, &nb)) in ca.iter().zip(cb.iter()).enumerate() {
        let x0 = MARGIN + bi as u32 * bar_w;
        for (n, color, offset) in [
            (na, Rgb([60, 120, 216]), 0),
            (nb, Rgb([220, 80, 60]), bar_w / 2),
        ] {
            let h = ((n as f64 / max) * (H - 2 * MARGIN) as f64) as u32;
            for dx in 0..bar_w / 2 {
                for dy in 0..h {
                    let x = x0 + offset + dx;
                    let y = H - MARGIN - 1 - dy;
                    if x < W {
                        img.put_pixel(x, y, color);
                    }
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
