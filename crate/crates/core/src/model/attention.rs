//! Spatial attention conditioned on the auxiliary vector.
//!
//! Each location's feature column is concatenated with the auxiliary vector, scored by a
//! two-layer perceptron, and the scores are softmax-normalized over all locations.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};

#[derive(Debug, Clone)]
pub struct AttentionParams<'a> {
    /// `hidden × (C + D)`; the first `C` columns act on features.
    pub fc1_weight: ArrayView2<'a, f64>,
    pub fc1_bias: ArrayView1<'a, f64>,
    /// `1 × hidden`.
    pub fc2_weight: ArrayView2<'a, f64>,
    pub fc2_bias: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    features: Array4<f64>,
    /// Pre-activation hidden units, `N × hidden × L`.
    hidden: Array3<f64>,
    pub alpha: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub features: Array4<f64>,
    pub fc1_weight: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub fc2_weight: Array2<f64>,
    pub fc2_bias: f64,
}

/// Returns the attended features `F ⊙ α` and the cache holding `α` (`N × H·W`).
pub fn attention_forward(
    features: &Array4<f64>,
    aux: ArrayView2<'_, f64>,
    p: &AttentionParams<'_>,
) -> (Array4<f64>, AttentionCache) {
    let (n, c, h, w) = features.dim();
    let l = h * w;
    let hidden = p.fc1_weight.nrows();
    let w_feat = p.fc1_weight.slice(s![.., ..c]);
    let w_aux = p.fc1_weight.slice(s![.., c..]);
    let mut aux_term = aux.dot(&w_aux.t());
    aux_term += &p.fc1_bias;

    let mut pre = Array3::zeros((n, hidden, l));
    let mut alpha = Array2::zeros((n, l));
    let mut out = features.clone();
    for i in 0..n {
        let f = features
            .index_axis(Axis(0), i)
            .into_shape_with_order((c, l))
            .expect("contiguous");
        let mut hi = w_feat.dot(&f);
        hi += &aux_term.row(i).insert_axis(Axis(1));
        let r = hi.mapv(|v| v.max(0.0));
        let z = p.fc2_weight.dot(&r).row(0).mapv(|v| v + p.fc2_bias);
        let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e = z.mapv(|v| (v - m).exp());
        let a = &e / e.sum();
        for ch in 0..c {
            let mut plane = out.slice_mut(s![i, ch, .., ..]);
            for (k, v) in plane.iter_mut().enumerate() {
                *v *= a[k];
            }
        }
        alpha.row_mut(i).assign(&a);
        pre.index_axis_mut(Axis(0), i).assign(&hi);
    }
    (
        out,
        AttentionCache {
            features: features.clone(),
            hidden: pre,
            alpha,
        },
    )
}

/// Backpropagates `d_out` (shape of the attended features). The auxiliary vector is an
/// input, so its gradient is not returned.
pub fn attention_backward(
    cache: &AttentionCache,
    aux: ArrayView2<'_, f64>,
    p: &AttentionParams<'_>,
    d_out: &Array4<f64>,
) -> AttentionGrads {
    let (n, c, h, w) = cache.features.dim();
    let l = h * w;
    let hidden = p.fc1_weight.nrows();
    let w_feat = p.fc1_weight.slice(s![.., ..c]);
    let mut d_features = Array4::zeros(cache.features.dim());
    let mut dw_feat = Array2::zeros((hidden, c));
    let mut dw2 = Array2::zeros((1, hidden));
    let mut db2 = 0.0;
    let mut dh_sum = Array2::zeros((n, hidden));
    for i in 0..n {
        let f = cache
            .features
            .index_axis(Axis(0), i)
            .into_shape_with_order((c, l))
            .expect("contiguous");
        let dout = d_out
            .index_axis(Axis(0), i)
            .into_shape_with_order((c, l))
            .expect("contiguous");
        let a = cache.alpha.row(i);
        let mut dfi = &dout * &a.insert_axis(Axis(0));
        // dα_l = Σ_c dOut_cl F_cl
        let dalpha = (&dout * &f).sum_axis(Axis(0));
        let dot = (&dalpha * &a).sum();
        let dz = &a * &dalpha.mapv(|v| v - dot);
        let hi = cache.hidden.index_axis(Axis(0), i);
        let r = hi.mapv(|v| v.max(0.0));
        let dz_row = dz.view().insert_axis(Axis(0));
        dw2 += &dz_row.dot(&r.t());
        db2 += dz.sum();
        let mut dh = p.fc2_weight.t().dot(&dz_row);
        ndarray::Zip::from(&mut dh).and(&hi).for_each(|d, &pre| {
            if pre <= 0.0 {
                *d = 0.0;
            }
        });
        dw_feat += &dh.dot(&f.t());
        dh_sum.row_mut(i).assign(&dh.sum_axis(Axis(1)));
        dfi += &w_feat.t().dot(&dh);
        d_features
            .index_axis_mut(Axis(0), i)
            .assign(&dfi.into_shape_with_order((c, h, w)).expect("contiguous"));
    }
    let dw_aux = dh_sum.t().dot(&aux);
    let mut fc1_weight = Array2::zeros(p.fc1_weight.dim());
    fc1_weight.slice_mut(s![.., ..c]).assign(&dw_feat);
    fc1_weight.slice_mut(s![.., c..]).assign(&dw_aux);
    AttentionGrads {
        features: d_features,
        fc1_weight,
        fc1_bias: dh_sum.sum_axis(Axis(0)),
        fc2_weight: dw2,
        fc2_bias: db2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    /// Scalar-loop evaluation for a single instance.
    fn unrolled(f: &Array4<f64>, a: &[f64], w1: &Array2<f64>, b1: &[f64], w2: &[f64], b2: f64) -> (Vec<f64>, Array4<f64>) {
        let (_, c, h, w) = f.dim();
        let mut z = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut input: Vec<f64> = (0..c).map(|ch| f[[0, ch, y, x]]).collect();
                input.extend_from_slice(a);
                let mut s = b2;
                for k in 0..w1.nrows() {
                    let mut pre = b1[k];
                    for (j, v) in input.iter().enumerate() {
                        pre += w1[[k, j]] * v;
                    }
                    s += w2[k] * pre.max(0.0);
                }
                z.push(s);
            }
        }
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let alpha: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        let mut out = f.clone();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[0, ch, y, x]] *= alpha[y * w + x];
                }
            }
        }
        (alpha, out)
    }

    #[test]
    fn matches_unrolled_two_by_two() {
        let f = array![[[[0.5, -1.0], [2.0, 0.3]], [[1.5, 0.2], [-0.7, 0.9]]]];
        let a = [0.4, -0.6, 1.0];
        let w1 = array![
            [0.2, -0.1, 0.3, 0.5, -0.2],
            [-0.4, 0.6, 0.1, -0.3, 0.2],
            [0.3, 0.3, -0.5, 0.2, 0.4]
        ];
        let b1 = [0.1, -0.05, 0.2];
        let w2 = [0.7, -1.2, 0.9];
        let b2 = 0.3;
        let w2m = Array2::from_shape_vec((1, 3), w2.to_vec()).unwrap();
        let av = Array2::from_shape_vec((1, 3), a.to_vec()).unwrap();
        let b1v = Array1::from(b1.to_vec());
        let p = AttentionParams {
            fc1_weight: w1.view(),
            fc1_bias: b1v.view(),
            fc2_weight: w2m.view(),
            fc2_bias: b2,
        };
        let (out, cache) = attention_forward(&f, av.view(), &p);
        let (alpha, expected) = unrolled(&f, &a, &w1, &b1, &w2, b2);
        for (x, y) in cache.alpha.iter().zip(&alpha) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((cache.alpha.sum() - 1.0).abs() < 1e-12);
        for (x, y) in out.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let f = Array::from_shape_fn((2, 3, 2, 3), |(n, c, y, x)| ((n * 7 + c * 5 + y * 3 + x) as f64 * 0.37).sin());
        let aux = Array::from_shape_fn((2, 2), |(n, d)| ((n * 2 + d) as f64 * 0.9).cos());
        let w1 = Array::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 1.3).sin() * 0.5);
        let b1 = Array1::from(vec![0.1, -0.2, 0.05, 0.3]);
        let w2 = Array::from_shape_fn((1, 4), |(_, j)| (j as f64 - 1.5) * 0.4);
        let dout = Array::from_shape_fn(f.dim(), |(n, c, y, x)| ((n + c * 2 + y * 3 + x) as f64 * 0.61).cos());
        let loss = |f: &Array4<f64>, w1: &Array2<f64>| {
            let p = AttentionParams {
                fc1_weight: w1.view(),
                fc1_bias: b1.view(),
                fc2_weight: w2.view(),
                fc2_bias: 0.2,
            };
            (&attention_forward(f, aux.view(), &p).0 * &dout).sum()
        };
        let p = AttentionParams {
            fc1_weight: w1.view(),
            fc1_bias: b1.view(),
            fc2_weight: w2.view(),
            fc2_bias: 0.2,
        };
        let (_, cache) = attention_forward(&f, aux.view(), &p);
        let g = attention_backward(&cache, aux.view(), &p, &dout);
        let eps = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 2, 1, 2), (0, 1, 1, 0)] {
            let mut fp = f.clone();
            fp[idx] += eps;
            let mut fm = f.clone();
            fm[idx] -= eps;
            let fd = (loss(&fp, &w1) - loss(&fm, &w1)) / (2.0 * eps);
            assert!((fd - g.features[idx]).abs() < 1e-7, "{fd} vs {}", g.features[idx]);
        }
        for idx in [(0, 0), (2, 4), (3, 1)] {
            let mut wp = w1.clone();
            wp[idx] += eps;
            let mut wm = w1.clone();
            wm[idx] -= eps;
            let fd = (loss(&f, &wp) - loss(&f, &wm)) / (2.0 * eps);
            assert!((fd - g.fc1_weight[idx]).abs() < 1e-7, "{fd} vs {}", g.fc1_weight[idx]);
        }
    }
}
