mod common;

use common::*;
use m2fn_core::objectives::loss::{EMD_DEFAULT_R, KLD_FLOOR};
use m2fn_core::objectives::{evaluate, loss_emd, loss_kld, pearson, spearman, LossBatch, LossKind, Scores};
use ndarray::Array2;
use proptest::prelude::*;

/// Values on a coarse grid so ties are common.
fn tied_vec(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-6i32..6).prop_map(|v| v as f64 * 0.5), n)
}

fn distributions(rows: usize, k: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..1.0, rows * k).prop_map(move |v| {
        let mut m = Array2::from_shape_vec((rows, k), v).unwrap();
        for mut r in m.rows_mut() {
            r.mapv_inplace(|x| x + 1e-3);
            let s = r.sum();
            r /= s;
        }
        m
    })
}

fn not_constant(v: &[f64]) -> bool {
    v.iter().any(|&x| x != v[0])
}

proptest! {
    #[test]
    fn spearman_matches_brute_force(pair in (3usize..=30).prop_flat_map(|n| (tied_vec(n..=n), tied_vec(n..=n)))) {
        let (xs, ys) = pair;
        prop_assume!(not_constant(&xs) && not_constant(&ys));
        let s = spearman(&xs, &ys).unwrap();
        prop_assert!((s - brute_spearman(&xs, &ys)).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn pearson_matches_moment_formula(
        pair in (2usize..=30).prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n)))
    ) {
        let (xs, ys) = pair;
        prop_assume!(not_constant(&xs) && not_constant(&ys));
        prop_assert!((pearson(&xs, &ys).unwrap() - moment_pearson(&xs, &ys)).abs() < 1e-9);
    }

    #[test]
    fn kld_and_emd_match_naive_sums(p in distributions(4, 10), q in distributions(4, 10)) {
        let b = LossBatch::distribution(q.view(), p.view()).unwrap();
        prop_assert!((loss_kld(&b, KLD_FLOOR).unwrap() - naive_kld(&p, &q, KLD_FLOOR)).abs() < 1e-9);
        for r in [1.0, 2.0, 3.0] {
            prop_assert!((loss_emd(&b, r).unwrap() - naive_emd(&p, &q, r)).abs() < 1e-9);
        }
        prop_assert!(loss_kld(&LossBatch::distribution(p.view(), p.view()).unwrap(), KLD_FLOOR).unwrap().abs() < 1e-12);
    }

    #[test]
    fn distribution_gradients_match_central_differences(p in distributions(3, 10), q in distributions(3, 10)) {
        prop_assert!(loss_gradient_error(LossKind::Kld, &q, &p, &[]) < 1e-4);
        prop_assert!(loss_gradient_error(LossKind::Emd, &q, &p, &[]) < 1e-4);
    }

    #[test]
    fn wmse_gradient_matches_central_differences(
        v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 1.0f64..500.0), 1..12)
    ) {
        let pred = Array2::from_shape_fn((v.len(), 1), |(i, _)| v[i].0);
        let target = Array2::from_shape_fn((v.len(), 1), |(i, _)| v[i].1);
        let w: Vec<f64> = v.iter().map(|t| t.2).collect();
        prop_assert!(loss_gradient_error(LossKind::WeightedMse, &pred, &target, &w) < 1e-4);
    }

    #[test]
    fn distribution_report_uses_moment_correlations(p in distributions(12, 10), q in distributions(12, 10)) {
        let r = evaluate(Scores::Distributions(q.view()), Scores::Distributions(p.view())).unwrap();
        let mean = |m: &Array2<f64>| -> Vec<f64> {
            m.rows().into_iter().map(|r| r.iter().enumerate().map(|(k, v)| (k + 1) as f64 * v).sum()).collect()
        };
        let (pm, qm) = (mean(&p), mean(&q));
        prop_assert!((r.sprc_mean - brute_spearman(&qm, &pm)).abs() < 1e-9);
        prop_assert!((r.lcc_mean - moment_pearson(&qm, &pm)).abs() < 1e-9);
        prop_assert!(r.sprc_std.is_some() && r.lcc_std.is_some());
    }
}

#[test]
fn emd_default_exponent_is_two() {
    assert_eq!(EMD_DEFAULT_R, 2.0);
    let p = Array2::from_shape_fn((1, 10), |(_, k)| if k == 0 { 1.0 } else { 0.0 });
    let q = Array2::from_shape_fn((1, 10), |(_, k)| if k == 9 { 1.0 } else { 0.0 });
    // CDFs differ by 1 at the first nine buckets: sqrt(9/10)
    let b = LossBatch::distribution(q.view(), p.view()).unwrap();
    assert!((loss_emd(&b, 2.0).unwrap() - 0.9f64.sqrt()).abs() < 1e-12);
}
