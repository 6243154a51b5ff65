//! Training objectives over scalar CTR predictions or ten-bucket distributions.
//!
//! Each loss comes with its analytic gradient with respect to the predictions, shaped like the
//! prediction matrix (`N × 1` for regression, `N × K` for distributions).

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KLD_FLOOR: f64 = 1e-12;
pub const EMD_DEFAULT_R: f64 = 2.0;
const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Regression,
    Distribution,
}

#[derive(Debug, Clone)]
pub struct LossBatch<'a> {
    mode: ScoreMode,
    predictions: ArrayView2<'a, f64>,
    targets: ArrayView2<'a, f64>,
    weights: Option<ArrayView1<'a, f64>>,
}

impl<'a> LossBatch<'a> {
    /// Scalar predictions with per-instance impression weights.
    pub fn regression(predictions: &'a [f64], targets: &'a [f64], weights: &'a [f64]) -> Result<Self> {
        let n = predictions.len();
        let p = ArrayView2::from_shape((n, 1), predictions).expect("contiguous");
        let t = ArrayView2::from_shape((targets.len(), 1), targets).expect("contiguous");
        Self::regression_view(p, t, ArrayView1::from(weights))
    }

    pub fn regression_view(
        predictions: ArrayView2<'a, f64>,
        targets: ArrayView2<'a, f64>,
        weights: ArrayView1<'a, f64>,
    ) -> Result<Self> {
        let n = predictions.nrows();
        if n == 0 || predictions.ncols() != 1 || targets.dim() != (n, 1) || weights.len() != n {
            return Err(Error::Shape(format!(
                "regression batch: predictions {:?}, targets {:?}, weights {}",
                predictions.dim(),
                targets.dim(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("loss weights must be positive"));
        }
        Ok(LossBatch {
            mode: ScoreMode::Regression,
            predictions,
            targets,
            weights: Some(weights),
        })
    }

    pub fn distribution(predictions: ArrayView2<'a, f64>, targets: ArrayView2<'a, f64>) -> Result<Self> {
        if predictions.nrows() == 0 || predictions.dim() != targets.dim() {
            return Err(Error::Shape(format!(
                "distribution batch: predictions {:?} vs targets {:?}",
                predictions.dim(),
                targets.dim()
            )));
        }
        Ok(LossBatch {
            mode: ScoreMode::Distribution,
            predictions,
            targets,
            weights: None,
        })
    }

    pub fn mode(&self) -> ScoreMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.predictions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn require(&self, mode: ScoreMode, what: &'static str) -> Result<()> {
        if self.mode != mode {
            return Err(Error::ModeMismatch(what));
        }
        Ok(())
    }
}

/// `(1/N) Σ w_n (ŷ_n − y_n)²`, normalized by the instance count.
pub fn loss_weighted_mse(batch: &LossBatch<'_>) -> Result<f64> {
    Ok(weighted_mse_with_grad(batch)?.0)
}

pub fn weighted_mse_with_grad(batch: &LossBatch<'_>) -> Result<(f64, Array2<f64>)> {
    batch.require(ScoreMode::Regression, "weighted MSE needs scalar predictions")?;
    let w = batch.weights.expect("regression batches carry weights");
    let n = batch.len() as f64;
    let mut grad = Array2::zeros((batch.len(), 1));
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let d = batch.predictions[[i, 0]] - batch.targets[[i, 0]];
        loss += w[i] * d * d;
        grad[[i, 0]] = 2.0 * w[i] * d / n;
    }
    Ok((loss / n, grad))
}

fn check_nonnegative(m: &ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if m.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("{what} contain a negative or non-finite bucket")));
    }
    Ok(())
}

/// `(1/N) Σ_n Σ_k p_k log(p_k / p̂_k)` with `0·log 0 = 0` and `p̂` floored inside the log.
pub fn loss_kld(batch: &LossBatch<'_>, floor: f64) -> Result<f64> {
    Ok(kld_with_grad(batch, floor)?.0)
}

pub fn kld_with_grad(batch: &LossBatch<'_>, floor: f64) -> Result<(f64, Array2<f64>)> {
    batch.require(ScoreMode::Distribution, "KL divergence needs distributions")?;
    check_nonnegative(&batch.predictions, "predictions")?;
    check_nonnegative(&batch.targets, "targets")?;
    let n = batch.len() as f64;
    let mut grad = Array2::zeros(batch.predictions.dim());
    let mut loss = 0.0;
    for ((g, &p), &q) in grad.iter_mut().zip(batch.targets.iter()).zip(batch.predictions.iter()) {
        if p == 0.0 {
            continue;
        }
        let q_eff = q.max(floor);
        loss += p * (p.ln() - q_eff.ln());
        if q > floor {
            *g = -p / (q * n);
        }
    }
    Ok((loss / n, grad))
}

fn check_rows_normalized(m: &ArrayView2<'_, f64>, what: &str) -> Result<()> {
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::invalid(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// `(1/N) Σ_n ((1/K) Σ_k |CDF_p(k) − CDF_p̂(k)|^r)^{1/r}`.
pub fn loss_emd(batch: &LossBatch<'_>, r: f64) -> Result<f64> {
    Ok(emd_with_grad(batch, r)?.0)
}

pub fn emd_with_grad(batch: &LossBatch<'_>, r: f64) -> Result<(f64, Array2<f64>)> {
    batch.require(ScoreMode::Distribution, "EMD needs distributions")?;
    if !(r >= 1.0) {
        return Err(Error::invalid("EMD exponent must be at least 1"));
    }
    check_rows_normalized(&batch.predictions, "predictions")?;
    check_rows_normalized(&batch.targets, "targets")?;
    let n = batch.len() as f64;
    let k = batch.predictions.ncols();
    let mut grad = Array2::zeros(batch.predictions.dim());
    let mut loss = 0.0;
    let mut diff = vec![0.0; k];
    for (row, (pred, target)) in batch
        .predictions
        .axis_iter(Axis(0))
        .zip(batch.targets.axis_iter(Axis(0)))
        .enumerate()
    {
        let (mut cp, mut ct) = (0.0, 0.0);
        for j in 0..k {
            cp += pred[j];
            ct += target[j];
            diff[j] = cp - ct;
        }
        let mean_pow = diff.iter().map(|d| d.abs().powf(r)).sum::<f64>() / k as f64;
        let e = mean_pow.powf(1.0 / r);
        loss += e;
        if e > 0.0 {
            // dE/dD_j, then accumulate suffix sums since D_j depends on predictions 0..=j
            let scale = e.powf(1.0 - r) / k as f64;
            let mut acc = 0.0;
            for j in (0..k).rev() {
                acc += scale * diff[j].abs().powf(r - 1.0) * diff[j].signum();
                grad[[row, j]] = acc / n;
            }
        }
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(rename = "wmse")]
    WeightedMse,
    Kld,
    Emd,
}

impl LossKind {
    pub fn mode(self) -> ScoreMode {
        match self {
            LossKind::WeightedMse => ScoreMode::Regression,
            LossKind::Kld | LossKind::Emd => ScoreMode::Distribution,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::WeightedMse => "wmse",
            LossKind::Kld => "kld",
            LossKind::Emd => "emd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wmse" | "weighted_mse" => Ok(LossKind::WeightedMse),
            "kld" => Ok(LossKind::Kld),
            "emd" => Ok(LossKind::Emd),
            other => Err(Error::invalid(format!("unknown loss `{other}` (expected wmse, kld or emd)"))),
        }
    }

    pub fn value_and_grad(self, batch: &LossBatch<'_>) -> Result<(f64, Array2<f64>)> {
        match self {
            LossKind::WeightedMse => weighted_mse_with_grad(batch),
            LossKind::Kld => kld_with_grad(batch, KLD_FLOOR),
            LossKind::Emd => emd_with_grad(batch, EMD_DEFAULT_R),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn wmse_examples() {
        let b = LossBatch::regression(&[0.3, 0.1], &[0.3, 0.1], &[5.0, 7.0]).unwrap();
        assert_eq!(loss_weighted_mse(&b).unwrap(), 0.0);
        let b = LossBatch::regression(&[0.4], &[0.3], &[2.0]).unwrap();
        assert!((loss_weighted_mse(&b).unwrap() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn wmse_gradient_matches_central_differences() {
        let preds = [0.12, -0.3, 0.55];
        let targets = [0.1, 0.2, 0.5];
        let w = [3.0, 1.0, 10.0];
        let b = LossBatch::regression(&preds, &targets, &w).unwrap();
        let (_, g) = weighted_mse_with_grad(&b).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut up = preds;
            up[i] += h;
            let mut dn = preds;
            dn[i] -= h;
            let fd = (loss_weighted_mse(&LossBatch::regression(&up, &targets, &w).unwrap()).unwrap()
                - loss_weighted_mse(&LossBatch::regression(&dn, &targets, &w).unwrap()).unwrap())
                / (2.0 * h);
            assert!((fd - g[[i, 0]]).abs() < 1e-6);
            assert!((g[[i, 0]] - 2.0 * w[i] * (preds[i] - targets[i]) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mode_and_weight_errors() {
        let p = array![[0.5, 0.5]];
        let d = LossBatch::distribution(p.view(), p.view()).unwrap();
        assert!(matches!(loss_weighted_mse(&d), Err(Error::ModeMismatch(_))));
        let r = LossBatch::regression(&[0.1], &[0.1], &[1.0]).unwrap();
        assert!(loss_kld(&r, KLD_FLOOR).is_err());
        assert!(loss_emd(&r, 2.0).is_err());
        assert!(LossBatch::regression(&[0.1], &[0.1], &[0.0]).is_err());
        assert!(LossBatch::regression(&[0.1, 0.2], &[0.1], &[1.0]).is_err());
    }

    #[test]
    fn kld_examples() {
        let p = array![[0.2, 0.3, 0.5]];
        assert_eq!(loss_kld(&LossBatch::distribution(p.view(), p.view()).unwrap(), KLD_FLOOR).unwrap(), 0.0);
        let target = array![[1.0, 0.0]];
        let pred = array![[0.5, 0.5]];
        let v = loss_kld(&LossBatch::distribution(pred.view(), target.view()).unwrap(), KLD_FLOOR).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let neg = array![[1.1, -0.1]];
        assert!(loss_kld(&LossBatch::distribution(pred.view(), neg.view()).unwrap(), KLD_FLOOR).is_err());
    }

    #[test]
    fn emd_examples() {
        let mut e1 = Array2::zeros((1, 10));
        e1[[0, 0]] = 1.0;
        let mut e2 = Array2::zeros((1, 10));
        e2[[0, 1]] = 1.0;
        let v = loss_emd(&LossBatch::distribution(e2.view(), e1.view()).unwrap(), 2.0).unwrap();
        assert!((v - (0.1f64).sqrt()).abs() < 1e-12);
        assert_eq!(loss_emd(&LossBatch::distribution(e1.view(), e1.view()).unwrap(), 2.0).unwrap(), 0.0);
        let bad = array![[0.5, 0.6]];
        assert!(loss_emd(&LossBatch::distribution(bad.view(), bad.view()).unwrap(), 2.0).is_err());
    }
}
