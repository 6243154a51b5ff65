//! One-way ANOVA screening of a categorical attribute against CTR.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_statistic: f64,
    pub p_value: f64,
    pub keep: bool,
    pub df_between: usize,
    pub df_within: usize,
    /// Levels dropped for having a single observation.
    pub excluded_levels: Vec<u8>,
}

pub fn anova_screen(levels: &[u8], ctrs: &[f64]) -> Result<AnovaResult> {
    if levels.len() != ctrs.len() {
        return Err(Error::Shape(format!(
            "{} levels vs {} ctr values",
            levels.len(),
            ctrs.len()
        )));
    }
    if ctrs.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite CTR value"));
    }
    let mut groups: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for (&l, &y) in levels.iter().zip(ctrs) {
        groups.entry(l).or_default().push(y);
    }
    let excluded_levels: Vec<u8> = groups
        .iter()
        .filter(|(_, g)| g.len() < 2)
        .map(|(&l, _)| l)
        .collect();
    for l in &excluded_levels {
        log::warn!("level {l} has a single observation; excluded from ANOVA");
        groups.remove(l);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("ANOVA needs at least two levels with two or more observations"));
    }

    let n: usize = groups.values().map(Vec::len).sum();
    let k = groups.len();
    let grand = groups.values().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups.values() {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|y| (y - m).powi(2)).sum::<f64>();
    }
    let df_between = k - 1;
    let df_within = n - k;
    let ms_between = ss_between / df_between as f64;
    let ms_within = ss_within / df_within as f64;

    let (f_statistic, p_value) = if ms_within > 0.0 {
        let f = ms_between / ms_within;
        let dist = FisherSnedecor::new(df_between as f64, df_within as f64)
            .map_err(|e| Error::invalid(format!("F distribution: {e}")))?;
        (f, dist.sf(f))
    } else if ms_between > 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        (0.0, 1.0)
    };

    Ok(AnovaResult {
        f_statistic,
        p_value,
        keep: p_value < SIGNIFICANCE_LEVEL,
        df_between,
        df_within,
        excluded_levels,
    })
}
