mod common;

use common::*;
use m2fn_core::model::fusion::{fusion_forward, FusionParams};
use m2fn_core::model::{Checkpoint, Mode, ModelConfig, Network, CBN_BLOCKS};
use m2fn_core::objectives::ScoreMode;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;

const DIM_AUX: usize = 7;

fn mask_of(bits: u8) -> [bool; CBN_BLOCKS] {
    std::array::from_fn(|b| bits >> b & 1 == 1)
}

#[test]
fn zero_delta_cbn_equals_plain_batch_norm() {
    for seed in 0..3 {
        let err = cbn_reduction_error(seed);
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn zero_aux_branch_nulls_fusion() {
    let image = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 - j as f64) * 0.3);
    let aux = Array2::from_shape_fn((3, 4), |(i, j)| (i * j) as f64 * 0.1 + 0.5);
    let iw = Array2::from_shape_fn((6, 5), |(i, j)| ((i + 2 * j) % 5) as f64 * 0.2 - 0.4);
    let ib = Array1::from_elem(6, 0.1);
    let aw = Array2::zeros((6, 4));
    let ab = Array1::zeros(6);
    let p = FusionParams {
        image_weight: iw.view(),
        image_bias: ib.view(),
        aux_weight: aw.view(),
        aux_bias: ab.view(),
    };
    let (fused, _) = fusion_forward(image.view(), aux.view(), &p);
    assert!(fused.iter().all(|&v| v == 0.0));
}

#[test]
fn module_free_config_is_a_pure_image_pipeline() {
    let net = Network::new(small_config(ModelConfig::tiny(DIM_AUX)).image_only()).unwrap();
    let w = net.init(1);
    assert!(w
        .params
        .names()
        .all(|n| !n.contains("cbn") && !n.starts_with("attention") && !n.starts_with("fusion")));
    assert_eq!(net.config().module_label(), "××××");
    let (img, aux) = random_inputs(3, 32, DIM_AUX, 5);
    let other = aux.mapv(|v| -3.0 * v + 1.0);
    let a = net.forward(&w, &img, Some(aux.view()), Mode::Eval).unwrap();
    let b = net.forward(&w, &img, Some(other.view()), Mode::Eval).unwrap();
    let c = net.forward(&w, &img, None, Mode::Eval).unwrap();
    assert_eq!(a.output, b.output);
    assert_eq!(a.output, c.output);
    assert!(a.attention.is_none());
}

#[test]
fn full_scale_feature_map_is_seven_by_seven() {
    let cfg = ModelConfig::real_ad(DIM_AUX);
    assert_eq!(cfg.backbone_scale.input_size(), 224);
    assert_eq!(cfg.backbone_scale.feature_shape(), (512, 7, 7));
    assert_eq!(cfg.mask_label(), "{1,0,0,0,0}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_mask_preserves_shapes(bits in 0u8..32, n in 2usize..4, distribution in any::<bool>()) {
        let mut cfg = small_config(ModelConfig::tiny(DIM_AUX));
        cfg = if bits == 0 { cfg.with_modules(true, false, true, true) } else { cfg.with_mask(mask_of(bits)) };
        if distribution {
            cfg.output_mode = ScoreMode::Distribution;
        }
        let net = Network::new(cfg.clone()).unwrap();
        let w = net.init(bits as u64);
        let (img, aux) = random_inputs(n, 32, DIM_AUX, bits as u64);
        let f = net.forward(&w, &img, Some(aux.view()), Mode::Train).unwrap();
        prop_assert_eq!(f.output.dim(), (n, cfg.output_dim()));
        prop_assert_eq!(f.taps["block5"].dim(), (n, 64, 4, 4));
        prop_assert_eq!(net.conditional_norms().len(), bits.count_ones() as usize);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_and_distribution_rows_sum_to_one(seed in any::<u64>()) {
        let mut cfg = small_config(ModelConfig::tiny(DIM_AUX));
        cfg.output_mode = ScoreMode::Distribution;
        let net = Network::new(cfg).unwrap();
        let w = net.init(seed);
        let (img, aux) = random_inputs(2, 32, DIM_AUX, seed);
        let f = net.forward(&w, &img, Some(aux.view()), Mode::Train).unwrap();
        for row in f.output.axis_iter(Axis(0)) {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        for row in f.attention.unwrap().axis_iter(Axis(0)) {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&a| a > 0.0));
        }
    }
}

#[test]
fn tiny_network_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny(DIM_AUX).with_mask([true; CBN_BLOCKS]);
    let e = network_gradient_error(cfg.clone(), 3);
    assert!(e < 1e-4, "{e}");
    let mut dist = small_config(cfg).with_mask([false, true, false, true, false]);
    dist.output_mode = ScoreMode::Distribution;
    let e = network_gradient_error(dist, 8);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let net = Network::new(small_config(ModelConfig::tiny(DIM_AUX))).unwrap();
    let mut w = net.init(12);
    let ck = Checkpoint::new(net.config().clone(), w.clone(), serde_json::json!({}));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    ck.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    let (img, aux) = random_inputs(3, 32, DIM_AUX, 1);
    w.params.round_to_f32();
    let a = net.forward(&back.weights, &img, Some(aux.view()), Mode::Eval).unwrap();
    let b = net.forward(&ck.weights, &img, Some(aux.view()), Mode::Eval).unwrap();
    let d = (&a.output - &b.output).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
    assert!(d < 1e-5, "{d}");
    assert_eq!(back.weights.params.max_abs_diff(&w.params), 0.0);
}
