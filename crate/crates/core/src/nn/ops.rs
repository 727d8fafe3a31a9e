//! Dense kernels: convolution (im2col + GEMM), batch norm, pooling, linear.
//!
//! All kernels are deterministic: parallel sections split work into fixed
//! chunks whose partial results are merged in index order, so the output is
//! bit-identical regardless of thread count.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array4, ArrayView2, ArrayView4};
use rayon::prelude::*;

/// Number of fixed work chunks for batch-parallel kernels. Independent of
/// the runtime thread count so results stay bit-stable.
const CHUNKS: usize = 4;

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    let size = n.div_ceil(CHUNKS).max(1);
    (0..n)
        .step_by(size)
        .map(|lo| (lo, (lo + size).min(n)))
        .collect()
}

/// Output spatial size for a conv/pool dimension.
pub fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lay out conv patches of `x` as a (C*K*K, N*OH*OW) matrix, columns ordered
/// sample-major.
pub fn im2col(x: &ArrayView4<f64>, kernel: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (out_dim(h, kernel, stride, pad), out_dim(w, kernel, stride, pad));
    let rows = c * kernel * kernel;
    let cols_per_sample = oh * ow;
    let mut cols = Array2::<f64>::zeros((rows, n * cols_per_sample));

    let col_chunks: Vec<_> = cols
        .axis_chunks_iter_mut(ndarray::Axis(1), cols_per_sample)
        .collect();
    col_chunks.into_par_iter().enumerate().for_each(|(ni, mut sample_cols)| {
        let xs = x.slice(s![ni, .., .., ..]);
        for ci in 0..c {
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let r = ci * kernel * kernel + ki * kernel + kj;
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            sample_cols[(r, oi * ow + oj)] = xs[(ci, ii as usize, jj as usize)];
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Scatter-add of `cols` (layout as produced by [`im2col`]) back to image space.
pub fn col2im(
    cols: &ArrayView2<f64>,
    shape: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let (oh, ow) = (out_dim(h, kernel, stride, pad), out_dim(w, kernel, stride, pad));
    let cols_per_sample = oh * ow;
    let mut x = Array4::<f64>::zeros((n, c, h, w));

    let x_chunks: Vec<_> = x.axis_iter_mut(ndarray::Axis(0)).collect();
    x_chunks.into_par_iter().enumerate().for_each(|(ni, mut xs)| {
        let sample_cols = cols.slice(s![.., ni * cols_per_sample..(ni + 1) * cols_per_sample]);
        for ci in 0..c {
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let r = ci * kernel * kernel + ki * kernel + kj;
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            xs[(ci, ii as usize, jj as usize)] += sample_cols[(r, oi * ow + oj)];
                        }
                    }
                }
            }
        }
    });
    x
}

/// `out = a · b` with the columns of `b`/`out` processed in fixed parallel chunks.
fn par_matmul_into(a: &ArrayView2<f64>, b: &ArrayView2<f64>, out: &mut Array2<f64>) {
    let ncols = b.ncols();
    let ranges = chunk_ranges(ncols);
    let b_slices: Vec<_> = ranges.iter().map(|&(lo, hi)| b.slice(s![.., lo..hi])).collect();
    let mut out_slices = Vec::new();
    let mut rest = out.view_mut();
    let mut consumed = 0;
    for &(lo, hi) in &ranges {
        let (head, tail) = rest.split_at(ndarray::Axis(1), hi - lo);
        debug_assert_eq!(lo, consumed);
        consumed = hi;
        out_slices.push(head);
        rest = tail;
    }
    out_slices
        .into_par_iter()
        .zip(b_slices.into_par_iter())
        .for_each(|(mut o, bs)| {
            general_mat_mul(1.0, a, &bs, 0.0, &mut o);
        });
}

pub struct ConvShape {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Convolution forward. `weight` is (OC, C, K, K) viewed as (OC, C*K*K);
/// optional per-channel bias.
pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    weight: &ArrayView2<f64>,
    bias: Option<&Array1<f64>>,
    cs: &ConvShape,
) -> Array4<f64> {
    let (n, _, h, w) = x.dim();
    let oc = weight.nrows();
    let (oh, ow) = (
        out_dim(h, cs.kernel, cs.stride, cs.pad),
        out_dim(w, cs.kernel, cs.stride, cs.pad),
    );
    let cols = im2col(x, cs.kernel, cs.stride, cs.pad);
    let mut out2 = Array2::<f64>::zeros((oc, n * oh * ow));
    par_matmul_into(weight, &cols.view(), &mut out2);

    let mut out = Array4::<f64>::zeros((n, oc, oh, ow));
    for ni in 0..n {
        for oci in 0..oc {
            let b = bias.map_or(0.0, |bv| bv[oci]);
            let src = out2.slice(s![oci, ni * oh * ow..(ni + 1) * oh * ow]);
            let mut dst = out.slice_mut(s![ni, oci, .., ..]);
            let mut dst_flat = dst.view_mut().into_shape_with_order(oh * ow).unwrap();
            dst_flat.assign(&src);
            if b != 0.0 {
                dst_flat += b;
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Array4<f64>,
    pub dweight: Array2<f64>,
    pub dbias: Option<Array1<f64>>,
}

/// Convolution backward; recomputes im2col from `x` rather than caching it.
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    weight: &ArrayView2<f64>,
    has_bias: bool,
    cs: &ConvShape,
    dout: &ArrayView4<f64>,
) -> ConvGrads {
    let (n, c, h, w) = x.dim();
    let (_, oc, oh, ow) = dout.dim();

    // (OC, N*OH*OW) with sample-major columns, matching im2col layout.
    let mut dout2 = Array2::<f64>::zeros((oc, n * oh * ow));
    for ni in 0..n {
        for oci in 0..oc {
            let src = dout.slice(s![ni, oci, .., ..]);
            let src_flat = src.into_shape_with_order(oh * ow).unwrap();
            dout2
                .slice_mut(s![oci, ni * oh * ow..(ni + 1) * oh * ow])
                .assign(&src_flat);
        }
    }

    let cols = im2col(x, cs.kernel, cs.stride, cs.pad);

    // dW = dOut · colsᵀ, accumulated over fixed column chunks in order.
    let ranges = chunk_ranges(n * oh * ow);
    let partials: Vec<Array2<f64>> = ranges
        .par_iter()
        .map(|&(lo, hi)| {
            let d = dout2.slice(s![.., lo..hi]);
            let ct = cols.slice(s![.., lo..hi]).reversed_axes();
            let mut p = Array2::<f64>::zeros((oc, c * cs.kernel * cs.kernel));
            general_mat_mul(1.0, &d, &ct, 0.0, &mut p);
            p
        })
        .collect();
    let mut dweight = Array2::<f64>::zeros((oc, c * cs.kernel * cs.kernel));
    for p in partials {
        dweight += &p;
    }

    // dcols = Wᵀ · dOut, then scatter back to image space.
    let wt = weight.t();
    let mut dcols = Array2::<f64>::zeros((c * cs.kernel * cs.kernel, n * oh * ow));
    par_matmul_into(&wt, &dout2.view(), &mut dcols);
    let dx = col2im(&dcols.view(), (n, c, h, w), cs.kernel, cs.stride, cs.pad);

    let dbias = has_bias.then(|| {
        let mut db = Array1::<f64>::zeros(oc);
        for oci in 0..oc {
            db[oci] = dout2.row(oci).sum();
        }
        db
    });

    ConvGrads { dx, dweight, dbias }
}

/// Max pooling forward; returns the pooled map and flat argmax indices
/// (into the input's H*W plane) for backward routing.
pub fn maxpool_forward(
    x: &ArrayView4<f64>,
    size: usize,
    stride: usize,
) -> (Array4<f64>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (out_dim(h, size, stride, 0), out_dim(w, size, stride, 0));
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    let mut idx = vec![0u32; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for ki in 0..size {
                        for kj in 0..size {
                            let (ii, jj) = (oi * stride + ki, oj * stride + kj);
                            let v = x[(ni, ci, ii, jj)];
                            if v > best {
                                best = v;
                                best_at = ii * w + jj;
                            }
                        }
                    }
                    out[(ni, ci, oi, oj)] = best;
                    idx[((ni * c + ci) * oh + oi) * ow + oj] = best_at as u32;
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool_backward(
    dout: &ArrayView4<f64>,
    idx: &[u32],
    input_shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (n, c, h, w) = input_shape;
    let (_, _, oh, ow) = dout.dim();
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let at = idx[((ni * c + ci) * oh + oi) * ow + oj] as usize;
                    dx[(ni, ci, at / w, at % w)] += dout[(ni, ci, oi, oj)];
                }
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

pub struct BnForward {
    pub y: Array4<f64>,
    /// Statistics used for normalization (batch stats in training, running
    /// stats in inference).
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Batch norm forward over (N, H, W) per channel.
pub fn batchnorm_forward(
    x: &ArrayView4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
    training: bool,
) -> BnForward {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let (mean, var) = if training {
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let xc = x.slice(s![.., ci, .., ..]);
            let mu = xc.sum() / m;
            let v = xc.fold(0.0, |acc, &e| acc + (e - mu) * (e - mu)) / m;
            mean[ci] = mu;
            var[ci] = v;
        }
        (mean, var)
    } else {
        (running_mean.clone(), running_var.clone())
    };

    let mut y = Array4::<f64>::zeros(x.dim());
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + BN_EPS).sqrt();
        let (g, b, mu) = (gamma[ci], beta[ci], mean[ci]);
        let xc = x.slice(s![.., ci, .., ..]);
        let mut yc = y.slice_mut(s![.., ci, .., ..]);
        yc.assign(&xc.mapv(|e| (e - mu) * inv_std * g + b));
    }
    BnForward { y, mean, var }
}

pub struct BnGrads {
    pub dx: Array4<f64>,
    pub dgamma: Array1<f64>,
    pub dbeta: Array1<f64>,
}

/// Batch norm backward. In training mode the gradient flows through the
/// batch statistics; in inference mode the layer is a fixed affine map.
pub fn batchnorm_backward(
    x: &ArrayView4<f64>,
    gamma: &Array1<f64>,
    stats_mean: &Array1<f64>,
    stats_var: &Array1<f64>,
    training: bool,
    dout: &ArrayView4<f64>,
) -> BnGrads {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let mut dx = Array4::<f64>::zeros(x.dim());
    let mut dgamma = Array1::<f64>::zeros(c);
    let mut dbeta = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let inv_std = 1.0 / (stats_var[ci] + BN_EPS).sqrt();
        let mu = stats_mean[ci];
        let xc = x.slice(s![.., ci, .., ..]);
        let dc = dout.slice(s![.., ci, .., ..]);
        let xhat = xc.mapv(|e| (e - mu) * inv_std);

        let sum_d = dc.sum();
        let sum_d_xhat = (&dc * &xhat).sum();
        dgamma[ci] = sum_d_xhat;
        dbeta[ci] = sum_d;

        let mut dxc = dx.slice_mut(s![.., ci, .., ..]);
        if training {
            let scale = gamma[ci] * inv_std;
            dxc.assign(
                &ndarray::Zip::from(&dc)
                    .and(&xhat)
                    .map_collect(|&d, &xh| scale * (d - sum_d / m - xh * sum_d_xhat / m)),
            );
        } else {
            dxc.assign(&dc.mapv(|d| d * gamma[ci] * inv_std));
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

/// Linear forward: y = x·Wᵀ + b for x (N, D), W (OC, D).
pub fn linear_forward(x: &ArrayView2<f64>, weight: &ArrayView2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&weight.t());
    for mut row in y.rows_mut() {
        row += bias;
    }
    y
}

pub struct LinearGrads {
    pub dx: Array2<f64>,
    pub dweight: Array2<f64>,
    pub dbias: Array1<f64>,
}

pub fn linear_backward(
    x: &ArrayView2<f64>,
    weight: &ArrayView2<f64>,
    dout: &ArrayView2<f64>,
) -> LinearGrads {
    let dweight = dout.t().dot(x);
    let dx = dout.dot(weight);
    let mut dbias = Array1::<f64>::zeros(weight.nrows());
    for row in dout.rows() {
        dbias += &row;
    }
    LinearGrads { dx, dweight, dbias }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn small_input() -> Array4<f64> {
        Array::linspace(-1.0, 1.0, 2 * 3 * 4 * 4)
            .into_shape_with_order((2, 3, 4, 4))
            .unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_channels_through() {
        let x = small_input();
        // 1x1 kernel selecting channel 1.
        let mut w = Array2::<f64>::zeros((1, 3));
        w[(0, 1)] = 1.0;
        let cs = ConvShape { kernel: 1, stride: 1, pad: 0 };
        let y = conv2d_forward(&x.view(), &w.view(), None, &cs);
        assert_eq!(y.dim(), (2, 1, 4, 4));
        assert_eq!(y[(0, 0, 2, 3)], x[(0, 1, 2, 3)]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random y: the two ops are adjoint.
        let x = small_input();
        let cols = im2col(&x.view(), 3, 1, 1);
        let y = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 31 + j * 17) % 7) as f64 - 3.0);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y.view(), (2, 3, 4, 4), 3, 1, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut x = Array4::<f64>::zeros((1, 1, 4, 4));
        x[(0, 0, 1, 1)] = 5.0;
        let (y, idx) = maxpool_forward(&x.view(), 2, 2);
        assert_eq!(y[(0, 0, 0, 0)], 5.0);
        let mut dout = Array4::<f64>::zeros((1, 1, 2, 2));
        dout[(0, 0, 0, 0)] = 1.0;
        let dx = maxpool_backward(&dout.view(), &idx, (1, 1, 4, 4));
        assert_eq!(dx[(0, 0, 1, 1)], 1.0);
        assert_eq!(dx.sum(), 1.0);
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let x = small_input();
        let gamma = Array1::ones(3);
        let beta = Array1::zeros(3);
        let rm = Array1::zeros(3);
        let rv = Array1::ones(3);
        let out = batchnorm_forward(&x.view(), &gamma, &beta, &rm, &rv, true);
        for ci in 0..3 {
            let yc = out.y.slice(s![.., ci, .., ..]);
            let m = yc.sum() / 32.0;
            assert!(m.abs() < 1e-12);
        }
    }
}
