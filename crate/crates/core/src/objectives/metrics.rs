//! Rank and linear correlation metrics.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::loss::ScoreMode;
use crate::data::distribution::moments;
use crate::error::{Error, Result};

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two observations"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in correlation input"));
    }
    Ok(())
}

/// Product-moment correlation, clamped to [-1, 1].
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sprc_mean: f64,
    pub lcc_mean: f64,
    pub sprc_std: Option<f64>,
    pub lcc_std: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum Scores<'a> {
    Scalars(&'a [f64]),
    /// One distribution per row.
    Distributions(ArrayView2<'a, f64>),
}

impl Scores<'_> {
    pub fn mode(&self) -> ScoreMode {
        match self {
            Scores::Scalars(_) => ScoreMode::Regression,
            Scores::Distributions(_) => ScoreMode::Distribution,
        }
    }
}

/// Per-row mean and standard deviation of bucket indices 1..=K.
pub fn distribution_moments(rows: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
    rows.axis_iter(Axis(0))
        .map(|r| moments(&r.to_vec()))
        .unzip()
}

/// SPRC/LCC on scalars, or on per-instance distribution means and standard deviations.
pub fn evaluate(predictions: Scores<'_>, targets: Scores<'_>) -> Result<MetricReport> {
    match (predictions, targets) {
        (Scores::Scalars(p), Scores::Scalars(t)) => Ok(MetricReport {
            sprc_mean: spearman(p, t)?,
            lcc_mean: pearson(p, t)?,
            sprc_std: None,
            lcc_std: None,
        }),
        (Scores::Distributions(p), Scores::Distributions(t)) => {
            if p.dim() != t.dim() {
                return Err(Error::Shape(format!("{:?} vs {:?}", p.dim(), t.dim())));
            }
            let (pm, ps) = distribution_moments(p);
            let (tm, ts) = distribution_moments(t);
            Ok(MetricReport {
                sprc_mean: spearman(&pm, &tm)?,
                lcc_mean: pearson(&pm, &tm)?,
                sprc_std: Some(spearman(&ps, &ts)?),
                lcc_std: Some(pearson(&ps, &ts)?),
            })
        }
        _ => Err(Error::ModeMismatch("predictions and targets differ in score mode")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_and_reversed() {
        let xs = [0.3, 1.0, -2.0, 5.5, 4.0];
        assert!((spearman(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((spearman(&xs, &rev).unwrap() + 1.0).abs() < 1e-12);
        let aff: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&xs, &aff).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_undefined() {
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[4.0, 4.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_get_mean_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn regression_report_has_no_std() {
        let r = evaluate(Scores::Scalars(&[0.1, 0.3, 0.2]), Scores::Scalars(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(r.sprc_std, None);
        let json = serde_json::to_value(r).unwrap();
        assert!(json["sprc_std"].is_null());
        assert_eq!(serde_json::from_value::<MetricReport>(json).unwrap(), r);
    }

    #[test]
    fn perfect_distribution_prediction() {
        let d = array![[0.5, 0.5, 0.0], [0.1, 0.2, 0.7], [0.0, 0.9, 0.1], [0.3, 0.3, 0.4]];
        let r = evaluate(Scores::Distributions(d.view()), Scores::Distributions(d.view())).unwrap();
        for v in [r.sprc_mean, r.lcc_mean, r.sprc_std.unwrap(), r.lcc_std.unwrap()] {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(evaluate(Scores::Scalars(&[1.0, 2.0, 3.0]), Scores::Distributions(d.view())).is_err());
    }

    proptest::proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(xs in proptest::collection::vec(-5.0f64..5.0, 3..25), ys in proptest::collection::vec(-5.0f64..5.0, 25)) {
            let ys = &ys[..xs.len()];
            if let Ok(base) = spearman(&xs, ys) {
                let tx: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
                let ty: Vec<f64> = ys.iter().map(|y| y * y * y + 2.0 * y).collect();
                proptest::prop_assert!((spearman(&tx, &ty).unwrap() - base).abs() < 1e-9);
            }
        }

        #[test]
        fn pearson_invariant_under_positive_affine(xs in proptest::collection::vec(-5.0f64..5.0, 3..25), ys in proptest::collection::vec(-5.0f64..5.0, 25), a in 0.1f64..10.0, b in -10.0f64..10.0) {
            let ys = &ys[..xs.len()];
            if let Ok(base) = pearson(&xs, ys) {
                let tx: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                proptest::prop_assert!((pearson(&tx, ys).unwrap() - base).abs() < 1e-9);
            }
        }
    }
}
