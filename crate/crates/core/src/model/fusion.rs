//! Gated high-level fusion: `tanh(W_i x + b_i) ⊙ tanh(W_a a + b_a)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use super::layers::{linear_backward, linear_forward};

#[derive(Debug, Clone)]
pub struct FusionParams<'a> {
    pub image_weight: ArrayView2<'a, f64>,
    pub image_bias: ArrayView1<'a, f64>,
    pub aux_weight: ArrayView2<'a, f64>,
    pub aux_bias: ArrayView1<'a, f64>,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    image_gate: Array2<f64>,
    aux_gate: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub image: Array2<f64>,
    pub image_weight: Array2<f64>,
    pub image_bias: Array1<f64>,
    pub aux_weight: Array2<f64>,
    pub aux_bias: Array1<f64>,
}

pub fn fusion_forward(image: ArrayView2<'_, f64>, aux: ArrayView2<'_, f64>, p: &FusionParams<'_>) -> (Array2<f64>, FusionCache) {
    let u = linear_forward(image, p.image_weight, p.image_bias).mapv(f64::tanh);
    let v = linear_forward(aux, p.aux_weight, p.aux_bias).mapv(f64::tanh);
    (
        &u * &v,
        FusionCache {
            image_gate: u,
            aux_gate: v,
        },
    )
}

pub fn fusion_backward(
    cache: &FusionCache,
    image: ArrayView2<'_, f64>,
    aux: ArrayView2<'_, f64>,
    p: &FusionParams<'_>,
    d_out: ArrayView2<'_, f64>,
) -> FusionGrads {
    let mut du = &d_out * &cache.aux_gate;
    Zip::from(&mut du).and(&cache.image_gate).for_each(|d, &u| *d *= 1.0 - u * u);
    let mut dv = &d_out * &cache.image_gate;
    Zip::from(&mut dv).and(&cache.aux_gate).for_each(|d, &v| *d *= 1.0 - v * v);
    let (dx, dwi, dbi) = linear_backward(image, p.image_weight, du.view());
    let (_, dwa, dba) = linear_backward(aux, p.aux_weight, dv.view());
    FusionGrads {
        image: dx,
        image_weight: dwi,
        image_bias: dbi,
        aux_weight: dwa,
        aux_bias: dba,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn width_three_by_hand() {
        let x = array![[1.0, -2.0]];
        let a = array![[0.5]];
        let wi = array![[0.1, 0.2], [-0.3, 0.4], [0.5, 0.0]];
        let bi = array![0.0, 0.1, -0.2];
        let wa = array![[1.0], [-1.0], [2.0]];
        let ba = array![0.0, 0.5, 0.0];
        let p = FusionParams {
            image_weight: wi.view(),
            image_bias: bi.view(),
            aux_weight: wa.view(),
            aux_bias: ba.view(),
        };
        let (out, _) = fusion_forward(x.view(), a.view(), &p);
        let expected = [
            (0.1f64 - 0.4).tanh() * 0.5f64.tanh(),
            (-0.3f64 - 0.8 + 0.1).tanh() * 0.0f64.tanh(),
            (0.5f64 - 0.2).tanh() * 1.0f64.tanh(),
        ];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_aux_branch_nulls_output() {
        let x = array![[3.0, -1.0], [0.2, 0.7]];
        let a = array![[5.0, 1.0], [-2.0, 0.0]];
        let wi = array![[0.1, 0.2], [-0.3, 0.4]];
        let bi = array![0.3, 0.1];
        let zeros = Array2::zeros((2, 2));
        let zb = Array1::zeros(2);
        let p = FusionParams {
            image_weight: wi.view(),
            image_bias: bi.view(),
            aux_weight: zeros.view(),
            aux_bias: zb.view(),
        };
        let (out, _) = fusion_forward(x.view(), a.view(), &p);
        assert!(out.iter().all(|&v| v == 0.0));
    }
}
