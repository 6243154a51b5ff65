//! Ten-bucket score distributions and the log-normal CTR approximation.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const BUCKETS: usize = 10;
pub const DEFAULT_LOGNORMAL_SHAPE: f64 = 1.0;

/// Normalized histogram over the ordered buckets 1..=10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreDistribution {
    buckets: [f64; BUCKETS],
}

impl TryFrom<Vec<f64>> for ScoreDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ScoreDistribution::new(&v)
    }
}

impl From<ScoreDistribution> for Vec<f64> {
    fn from(d: ScoreDistribution) -> Self {
        d.buckets.to_vec()
    }
}

impl ScoreDistribution {
    /// Validates a probability vector: ten finite nonnegative entries summing to 1 within 1e-6.
    pub fn new(buckets: &[f64]) -> Result<Self> {
        if buckets.len() != BUCKETS {
            return Err(Error::Shape(format!("expected {BUCKETS} buckets, got {}", buckets.len())));
        }
        if buckets.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid("distribution buckets must be finite and nonnegative"));
        }
        let sum: f64 = buckets.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("distribution sums to {sum}, not 1")));
        }
        let mut b = [0.0; BUCKETS];
        b.copy_from_slice(buckets);
        Ok(ScoreDistribution { buckets: b })
    }

    /// Normalizes raw rating counts. Returns `None` for an all-zero row.
    pub fn from_counts(counts: &[u64]) -> Result<Option<Self>> {
        if counts.len() != BUCKETS {
            return Err(Error::Shape(format!("expected {BUCKETS} counts, got {}", counts.len())));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Ok(None);
        }
        let mut b = [0.0; BUCKETS];
        for (dst, &c) in b.iter_mut().zip(counts) {
            *dst = c as f64 / total as f64;
        }
        Ok(Some(ScoreDistribution { buckets: b }))
    }

    pub fn point_mass(bucket: usize) -> Self {
        assert!(bucket < BUCKETS);
        let mut b = [0.0; BUCKETS];
        b[bucket] = 1.0;
        ScoreDistribution { buckets: b }
    }

    pub fn buckets(&self) -> &[f64; BUCKETS] {
        &self.buckets
    }

    /// Mean bucket index, with buckets numbered from 1.
    pub fn mean(&self) -> f64 {
        moments(&self.buckets).0
    }

    pub fn std(&self) -> f64 {
        moments(&self.buckets).1
    }
}

/// Mean and standard deviation of bucket indices 1..=K under probabilities `p`.
pub fn moments(p: &[f64]) -> (f64, f64) {
    let mean: f64 = p.iter().enumerate().map(|(k, &pk)| (k + 1) as f64 * pk).sum();
    let second: f64 = p.iter().enumerate().map(|(k, &pk)| ((k + 1) as f64).powi(2) * pk).sum();
    (mean, (second - mean * mean).max(0.0).sqrt())
}

/// Eleven strictly ascending CTR boundaries for the ten buckets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BucketEdges([f64; BUCKETS + 1]);

impl TryFrom<Vec<f64>> for BucketEdges {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        BucketEdges::new(&v)
    }
}

impl From<BucketEdges> for Vec<f64> {
    fn from(e: BucketEdges) -> Self {
        e.0.to_vec()
    }
}

impl BucketEdges {
    pub fn new(edges: &[f64]) -> Result<Self> {
        if edges.len() != BUCKETS + 1 {
            return Err(Error::Shape(format!("expected {} edges, got {}", BUCKETS + 1, edges.len())));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bucket edges must be finite and strictly ascending"));
        }
        let mut e = [0.0; BUCKETS + 1];
        e.copy_from_slice(edges);
        Ok(BucketEdges(e))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Deciles of the positive CTRs (min, 10%, ..., max), nudged apart where quantiles tie.
    pub fn from_ctr_deciles(ctrs: &[f64]) -> Result<Self> {
        let mut pos: Vec<f64> = ctrs.iter().copied().filter(|&c| c > 0.0 && c.is_finite()).collect();
        if pos.len() < 2 {
            return Err(Error::invalid("need at least two positive CTRs to place bucket edges"));
        }
        pos.sort_by(f64::total_cmp);
        let n = pos.len();
        let mut edges = [0.0; BUCKETS + 1];
        for (q, e) in edges.iter_mut().enumerate() {
            let h = (n - 1) as f64 * q as f64 / BUCKETS as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            *e = pos[lo] + (h - lo as f64) * (pos[hi] - pos[lo]);
        }
        for i in 1..edges.len() {
            if edges[i] <= edges[i - 1] {
                edges[i] = edges[i - 1] * (1.0 + 1e-9) + f64::MIN_POSITIVE;
            }
        }
        BucketEdges::new(&edges)
    }
}

fn lognormal_cdf(x: f64, log_median: f64, sigma: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    0.5 * erfc(-(x.ln() - log_median) / (sigma * std::f64::consts::SQRT_2))
}

/// Approximates a CTR by a log-normal with median `ctr` and shape `shape / sqrt(impressions)`,
/// integrated over the ten buckets and renormalized.
///
/// A zero CTR puts all mass in bucket 1; a CTR above the last edge puts all mass in bucket 10.
pub fn lognormal_distribution(ctr: f64, impressions: u64, edges: &BucketEdges, shape: f64) -> Result<ScoreDistribution> {
    if !(0.0..=1.0).contains(&ctr) {
        return Err(Error::invalid(format!("ctr {ctr} outside [0, 1]")));
    }
    if impressions == 0 {
        return Err(Error::invalid("impressions must be positive"));
    }
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(Error::invalid("log-normal shape must be positive"));
    }
    let e = edges.as_slice();
    if ctr == 0.0 {
        return Ok(ScoreDistribution::point_mass(0));
    }
    if ctr > e[BUCKETS] {
        log::warn!("ctr {ctr} above the last bucket edge {}; assigning bucket 10", e[BUCKETS]);
        return Ok(ScoreDistribution::point_mass(BUCKETS - 1));
    }
    let sigma = shape / (impressions as f64).sqrt();
    let log_median = ctr.ln();
    let cdf: Vec<f64> = e.iter().map(|&x| lognormal_cdf(x, log_median, sigma)).collect();
    let mut mass = [0.0; BUCKETS];
    for k in 0..BUCKETS {
        mass[k] = (cdf[k + 1] - cdf[k]).max(0.0);
    }
    let total: f64 = mass.iter().sum();
    if !(total > 1e-300) {
        // all mass fell below the first edge
        return Ok(ScoreDistribution::point_mass(0));
    }
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(ScoreDistribution { buckets: mass })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edges() -> BucketEdges {
        BucketEdges::new(&[0.001, 0.005, 0.008, 0.011, 0.014, 0.018, 0.022, 0.027, 0.034, 0.045, 0.08]).unwrap()
    }

    /// Composite Simpson integration of the log-normal density over each bucket.
    fn quadrature(ctr: f64, impressions: u64, e: &[f64]) -> Vec<f64> {
        let sigma = 1.0 / (impressions as f64).sqrt();
        let mu = ctr.ln();
        let pdf = |x: f64| {
            (-(x.ln() - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (x * sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut out: Vec<f64> = e
            .windows(2)
            .map(|w| {
                let n = 20_000;
                let h = (w[1] - w[0]) / n as f64;
                let mut s = pdf(w[0]) + pdf(w[1]);
                for i in 1..n {
                    s += pdf(w[0] + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
                }
                s * h / 3.0
            })
            .collect();
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|m| *m /= total);
        out
    }

    #[test]
    fn matches_quadrature() {
        let d = lognormal_distribution(0.02, 500, &edges(), 1.0).unwrap();
        let oracle = quadrature(0.02, 500, edges().as_slice());
        for (a, b) in d.buckets().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!((d.buckets().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn higher_ctr_has_higher_mean() {
        let lo = lognormal_distribution(0.01, 300, &edges(), 1.0).unwrap();
        let hi = lognormal_distribution(0.03, 300, &edges(), 1.0).unwrap();
        assert!(hi.mean() >= lo.mean());
    }

    #[test]
    fn boundary_cases() {
        assert_eq!(lognormal_distribution(0.0, 50, &edges(), 1.0).unwrap(), ScoreDistribution::point_mass(0));
        assert_eq!(lognormal_distribution(0.5, 50, &edges(), 1.0).unwrap(), ScoreDistribution::point_mass(9));
        assert!(lognormal_distribution(0.02, 0, &edges(), 1.0).is_err());
        assert!(lognormal_distribution(1.5, 5, &edges(), 1.0).is_err());
    }

    #[test]
    fn counts_normalize() {
        let mut counts = [0u64; 10];
        counts[9] = 10;
        let d = ScoreDistribution::from_counts(&counts).unwrap().unwrap();
        assert_eq!(d, ScoreDistribution::point_mass(9));
        assert!(ScoreDistribution::from_counts(&[0; 10]).unwrap().is_none());
    }

    #[test]
    fn moments_match_direct_sums() {
        let d = ScoreDistribution::from_counts(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]).unwrap().unwrap();
        let total = 55.0;
        let mean: f64 = (1..=10).map(|k| (k * k) as f64 / total).sum();
        let second: f64 = (1..=10).map(|k| (k * k * k) as f64 / total).sum();
        assert!((d.mean() - mean).abs() < 1e-12);
        assert!((d.std() - (second - mean * mean).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn deciles_ascend_even_with_ties() {
        let ctrs = [0.0, 0.0, 0.01, 0.01, 0.01, 0.01, 0.02, 0.03, 0.05, 0.1];
        let e = BucketEdges::from_ctr_deciles(&ctrs).unwrap();
        assert!(e.as_slice().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(e.as_slice()[0], 0.01);
        assert_eq!(e.as_slice()[10], 0.1);
    }

    proptest::proptest! {
        #[test]
        fn always_normalized(ctr in 1e-4f64..0.2, imps in 1u64..10_000) {
            let d = lognormal_distribution(ctr, imps, &edges(), 1.0).unwrap();
            proptest::prop_assert!((d.buckets().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            proptest::prop_assert!(d.buckets().iter().all(|&b| b >= 0.0));
        }
    }
}
