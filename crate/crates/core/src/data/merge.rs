//! Merging of rarely-seen categorical levels into their nearest well-populated neighbour.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::schema::Attribute;
use crate::error::{Error, Result};

pub const DEFAULT_MERGE_THRESHOLD: u64 = 50_000;

/// Maps each level to the level it is merged into.
///
/// Levels whose count reaches `threshold` map to themselves. Every other level maps to the
/// nearest qualifying level by code distance, ties resolved toward the lower code. When no level
/// qualifies, everything collapses onto the most frequent level (lowest code on ties).
pub fn merge_rare_levels(histogram: &BTreeMap<u8, u64>, threshold: u64) -> Result<BTreeMap<u8, u8>> {
    if histogram.is_empty() {
        return Err(Error::invalid("empty level histogram"));
    }
    let qualified: Vec<u8> = histogram
        .iter()
        .filter(|(_, &c)| c >= threshold)
        .map(|(&l, _)| l)
        .collect();

    if qualified.is_empty() {
        let (&target, _) = histogram
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("nonempty");
        log::warn!(
            "all {} levels fall below {threshold} impressions; merging into level {target}",
            histogram.len()
        );
        return Ok(histogram.keys().map(|&l| (l, target)).collect());
    }

    Ok(histogram
        .keys()
        .map(|&level| {
            let nearest = qualified
                .iter()
                .copied()
                .min_by_key(|&q| ((q as i32 - level as i32).abs(), q))
                .expect("nonempty");
            (level, nearest)
        })
        .collect())
}

/// Per-attribute merge maps covering every declared level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeMaps {
    maps: BTreeMap<Attribute, BTreeMap<u8, u8>>,
}

impl Default for MergeMaps {
    fn default() -> Self {
        Self::identity()
    }
}

impl MergeMaps {
    pub fn identity() -> Self {
        let maps = Attribute::ALL
            .iter()
            .map(|&a| (a, a.levels().map(|l| (l, l)).collect()))
            .collect();
        MergeMaps { maps }
    }

    /// Builds maps from impression counts per level. Levels that never occur count as zero.
    pub fn fit(counts: &BTreeMap<Attribute, BTreeMap<u8, u64>>, threshold: u64) -> Result<Self> {
        let mut maps = BTreeMap::new();
        for attr in Attribute::ALL {
            let observed = counts.get(&attr);
            let hist: BTreeMap<u8, u64> = attr
                .levels()
                .map(|l| (l, observed.and_then(|m| m.get(&l)).copied().unwrap_or(0)))
                .collect();
            maps.insert(attr, merge_rare_levels(&hist, threshold)?);
        }
        Ok(MergeMaps { maps })
    }

    pub fn map(&self, attribute: Attribute, level: u8) -> Result<u8> {
        self.maps
            .get(&attribute)
            .and_then(|m| m.get(&level))
            .copied()
            .ok_or(Error::UnknownLevel {
                attribute: attribute.name(),
                level,
            })
    }

    /// Distinct post-merge levels of an attribute, ascending.
    pub fn surviving_levels(&self, attribute: Attribute) -> Vec<u8> {
        let mut out: Vec<u8> = self
            .maps
            .get(&attribute)
            .map(|m| m.values().copied().collect())
            .unwrap_or_default();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(pairs: &[(u8, u64)]) -> BTreeMap<u8, u64> {
        pairs.iter().copied().collect()
    }

    /// Brute force: scan all levels at increasing distance, lower side first.
    fn oracle(h: &BTreeMap<u8, u64>, threshold: u64) -> BTreeMap<u8, u8> {
        let mut out = BTreeMap::new();
        for &l in h.keys() {
            if h[&l] >= threshold {
                out.insert(l, l);
                continue;
            }
            'search: for d in 1..=255i32 {
                for cand in [l as i32 - d, l as i32 + d] {
                    if let Some(&c) = u8::try_from(cand).ok().and_then(|c| h.get(&c)) {
                        if c >= threshold {
                            out.insert(l, cand as u8);
                            break 'search;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn no_rare_level_is_identity() {
        let h = hist(&[(1, 60_000), (2, 70_000)]);
        let m = merge_rare_levels(&h, 50_000).unwrap();
        assert_eq!(m, hist(&[(1, 1), (2, 2)]).into_iter().map(|(k, _)| (k, k)).collect());
    }

    #[test]
    fn rare_low_age_merges_upward() {
        let h = hist(&[(1, 10_000), (2, 80_000), (3, 60_000)]);
        let m = merge_rare_levels(&h, DEFAULT_MERGE_THRESHOLD).unwrap();
        assert_eq!(m[&1], 2);
        assert_eq!(m[&2], 2);
        assert_eq!(m[&3], 3);
        assert_eq!(m, oracle(&h, DEFAULT_MERGE_THRESHOLD));
    }

    #[test]
    fn tie_goes_to_lower_level() {
        let h = hist(&[(1, 90), (2, 5), (3, 90)]);
        assert_eq!(merge_rare_levels(&h, 50).unwrap()[&2], 1);
    }

    #[test]
    fn all_rare_collapse_to_single_level() {
        let h = hist(&[(1, 5), (2, 9), (3, 9)]);
        let m = merge_rare_levels(&h, 50).unwrap();
        assert!(m.values().all(|&v| v == 2));
    }

    #[test]
    fn fit_covers_unseen_levels() {
        let mut counts = BTreeMap::new();
        counts.insert(Attribute::Gender, hist(&[(1, 100)]));
        let maps = MergeMaps::fit(&counts, 10).unwrap();
        assert_eq!(maps.map(Attribute::Gender, 2).unwrap(), 1);
        assert_eq!(maps.surviving_levels(Attribute::Gender), vec![1]);
        assert_eq!(MergeMaps::identity().surviving_levels(Attribute::Time).len(), 24);
    }

    proptest::proptest! {
        #[test]
        fn matches_bruteforce(counts in proptest::collection::vec(0u64..200, 2..12), threshold in 1u64..150) {
            let h: BTreeMap<u8, u64> = counts.iter().enumerate().map(|(i, &c)| (i as u8 + 1, c)).collect();
            let m = merge_rare_levels(&h, threshold).unwrap();
            if h.values().any(|&c| c >= threshold) {
                proptest::prop_assert_eq!(m, oracle(&h, threshold));
            } else {
                let first = m.values().next().copied();
                proptest::prop_assert!(m.values().all(|&v| Some(v) == first));
            }
        }
    }
}
