//! Differentiable primitives on `N × C × H × W` feature tensors and `N × F` matrices.
//!
//! Every forward returns whatever its backward needs; nothing here holds state.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};

/// Unfolds 3×3 patches (zero padding 1) into a `(C·9) × (H·W)` matrix.
pub fn im2col3(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * 9, h * w));
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = ci * 9 + ky * 3 + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("standard layout");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[[ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: ArrayView2<'_, f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let src = cols.row(ci * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[[ci, sy as usize, sx as usize]] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// 3×3 convolution, stride 1, padding 1, no bias. `weight` is `C_out × (C_in·9)`.
pub fn conv3x3_forward(x: &Array4<f64>, weight: ArrayView2<'_, f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let cout = weight.nrows();
    debug_assert_eq!(weight.ncols(), c * 9);
    let mut y = Array4::zeros((n, cout, h, w));
    for i in 0..n {
        let cols = im2col3(x.index_axis(Axis(0), i));
        let out = weight.dot(&cols);
        y.index_axis_mut(Axis(0), i)
            .assign(&out.into_shape_with_order((cout, h, w)).expect("contiguous"));
    }
    y
}

pub fn conv3x3_backward(x: &Array4<f64>, weight: ArrayView2<'_, f64>, dy: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
    let (n, c, h, w) = x.dim();
    let cout = weight.nrows();
    let mut dx = Array4::zeros(x.dim());
    let mut dw = Array2::zeros(weight.dim());
    for i in 0..n {
        let cols = im2col3(x.index_axis(Axis(0), i));
        let dyi = dy
            .index_axis(Axis(0), i)
            .to_owned()
            .into_shape_with_order((cout, h * w))
            .expect("contiguous");
        ndarray::linalg::general_mat_mul(1.0, &dyi, &cols.t(), 1.0, &mut dw);
        let dcols = weight.t().dot(&dyi);
        dx.index_axis_mut(Axis(0), i).assign(&col2im3(dcols.view(), c, h, w));
    }
    (dx, dw)
}

pub fn relu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// 2×2 max pooling, stride 2. Returns the output and the flat argmax index per output cell.
pub fn maxpool2_forward(x: &Array4<f64>) -> (Array4<f64>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (yy, xx) = (2 * oy + dy, 2 * ox + dx);
                            let v = x[[i, ch, yy, xx]];
                            if v > best {
                                best = v;
                                best_idx = (yy * w + xx) as u32;
                            }
                        }
                    }
                    y[[i, ch, oy, ox]] = best;
                    arg.push(best_idx);
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(input_dim: (usize, usize, usize, usize), arg: &[u32], dy: &Array4<f64>) -> Array4<f64> {
    let (_, _, _, w) = input_dim;
    let mut dx = Array4::zeros(input_dim);
    let (n, c, oh, ow) = dy.dim();
    let mut k = 0;
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let idx = arg[k] as usize;
                    dx[[i, ch, idx / w, idx % w]] += dy[[i, ch, oy, ox]];
                    k += 1;
                }
            }
        }
    }
    dx
}

/// `x Wᵀ + b` with `W` stored `out × in`.
pub fn linear_forward(x: ArrayView2<'_, f64>, weight: ArrayView2<'_, f64>, bias: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut y = x.dot(&weight.t());
    y += &bias;
    y
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward(
    x: ArrayView2<'_, f64>,
    weight: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(&weight), dy.t().dot(&x), dy.sum_axis(Axis(0)))
}

/// Batch statistics over (N, H, W) per channel.
pub fn channel_stats(x: &Array4<f64>) -> (Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ch in 0..c {
        let v = x.slice(s![.., ch, .., ..]);
        let mu = v.sum() / m;
        mean[ch] = mu;
        var[ch] = v.fold(0.0, |acc, &t| acc + (t - mu) * (t - mu)) / m;
    }
    (mean, var)
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
    /// Effective per-instance scale, `N × C`.
    pub scale: Array2<f64>,
    pub batch_statistics: bool,
}

/// Normalizes per channel, then applies per-instance `scale[n, c]` and `shift[n, c]`.
///
/// With `batch_statistics` the mean and biased variance come from the batch; otherwise
/// `running` supplies them.
pub fn norm_forward(
    x: &Array4<f64>,
    scale: Array2<f64>,
    shift: ArrayView2<'_, f64>,
    running: (ArrayView1<'_, f64>, ArrayView1<'_, f64>),
    batch_statistics: bool,
    eps: f64,
) -> Result<(Array4<f64>, NormCache, Option<(Array1<f64>, Array1<f64>)>)> {
    let (n, c, _, _) = x.dim();
    if scale.dim() != (n, c) || shift.dim() != (n, c) {
        return Err(Error::Shape(format!(
            "norm modulation {:?}/{:?} for features {:?}",
            scale.dim(),
            shift.dim(),
            x.dim()
        )));
    }
    let (mean, var, stats) = if batch_statistics {
        if n < 2 {
            return Err(Error::invalid("batch statistics are undefined for a batch of one"));
        }
        let (m, v) = channel_stats(x);
        (m.clone(), v.clone(), Some((m, v)))
    } else {
        (running.0.to_owned(), running.1.to_owned(), None)
    };
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let mut xhat = x.clone();
    for (ch, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
        let (mu, is) = (mean[ch], inv_std[ch]);
        plane.mapv_inplace(|t| (t - mu) * is);
    }
    let mut y = xhat.clone();
    for i in 0..n {
        for ch in 0..c {
            let (g, b) = (scale[[i, ch]], shift[[i, ch]]);
            y.slice_mut(s![i, ch, .., ..]).mapv_inplace(|t| g * t + b);
        }
    }
    Ok((
        y,
        NormCache {
            xhat,
            inv_std,
            scale,
            batch_statistics,
        },
        stats,
    ))
}

/// Returns `(dx, dscale, dshift)` with the modulation gradients shaped `N × C`.
pub fn norm_backward(cache: &NormCache, dy: &Array4<f64>) -> (Array4<f64>, Array2<f64>, Array2<f64>) {
    let (n, c, h, w) = dy.dim();
    let mut dscale = Array2::zeros((n, c));
    let mut dshift = Array2::zeros((n, c));
    let mut dxhat = dy.clone();
    for i in 0..n {
        for ch in 0..c {
            let dyp = dy.slice(s![i, ch, .., ..]);
            let xp = cache.xhat.slice(s![i, ch, .., ..]);
            dscale[[i, ch]] = Zip::from(&dyp).and(&xp).fold(0.0, |acc, &a, &b| acc + a * b);
            dshift[[i, ch]] = dyp.sum();
            let g = cache.scale[[i, ch]];
            dxhat.slice_mut(s![i, ch, .., ..]).mapv_inplace(|t| t * g);
        }
    }
    let mut dx = dxhat;
    if cache.batch_statistics {
        let m = (n * h * w) as f64;
        for ch in 0..c {
            let dxh = dx.slice(s![.., ch, .., ..]);
            let xh = cache.xhat.slice(s![.., ch, .., ..]);
            let sum_d = dxh.sum();
            let sum_dx = Zip::from(&dxh).and(&xh).fold(0.0, |acc, &a, &b| acc + a * b);
            let is = cache.inv_std[ch];
            let mut out = dx.slice_mut(s![.., ch, .., ..]);
            Zip::from(&mut out).and(&xh).for_each(|d, &xv| {
                *d = is / m * (m * *d - sum_d - xv * sum_dx);
            });
        }
    } else {
        for ch in 0..c {
            let is = cache.inv_std[ch];
            dx.slice_mut(s![.., ch, .., ..]).mapv_inplace(|t| t * is);
        }
    }
    (dx, dscale, dshift)
}

/// Row-wise softmax.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Gradient w.r.t. logits given softmax output `p` and upstream `dp`.
pub fn softmax_backward(p: &Array2<f64>, dp: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(p.dim());
    for ((mut out, pr), dr) in dz.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))).zip(dp.axis_iter(Axis(0))) {
        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in out.iter_mut().zip(pr.iter()).zip(dr.iter()) {
            *o = pv * (dv - dot);
        }
    }
    dz
}
