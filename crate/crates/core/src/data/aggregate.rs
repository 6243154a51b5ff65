//! Aggregation of exposure logs into per-key click-through rates.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::schema::{AttributeTuple, ClickLogRecord};
use crate::error::{Error, Result};

/// A unique (image, attribute tuple) with its impression and click counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedInstance {
    #[serde(rename = "image")]
    pub image_id: String,
    #[serde(flatten)]
    pub attributes: AttributeTuple,
    pub impressions: u64,
    pub clicks: u64,
    pub ctr: f64,
}

impl AggregatedInstance {
    pub fn new(image_id: String, attributes: AttributeTuple, impressions: u64, clicks: u64) -> Self {
        debug_assert!(impressions >= 1 && clicks <= impressions);
        AggregatedInstance {
            image_id,
            attributes,
            impressions,
            clicks,
            ctr: clicks as f64 / impressions as f64,
        }
    }

    /// Re-expands the instance into exposure rows: `clicks` clicked rows then the rest.
    pub fn expand(&self) -> impl Iterator<Item = ClickLogRecord> + '_ {
        (0..self.impressions)
            .map(move |i| ClickLogRecord::from_key(&self.image_id, &self.attributes, i < self.clicks))
    }

    /// Stable identifier used for hashed splits.
    pub fn instance_key(&self) -> String {
        let a = &self.attributes;
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.image_id,
            a.gender,
            a.age,
            a.month,
            a.weekday,
            a.time,
            a.position,
            a.cate2,
            a.cate3,
            a.title,
            a.desc,
            a.ocr
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    impressions: u64,
    clicks: u64,
}

/// Streaming accumulator of (impressions, clicks) per key.
///
/// Shards may be accumulated independently and combined with [`Aggregator::merge`];
/// output order follows first appearance of each key.
#[derive(Debug, Default, Clone)]
pub struct Aggregator {
    counts: IndexMap<(String, AttributeTuple), Counts>,
    seen: usize,
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one record. `index` is the position reported if the record is malformed.
    pub fn push(&mut self, record: &ClickLogRecord) -> Result<()> {
        record.validate(self.seen)?;
        self.seen += 1;
        let entry = self
            .counts
            .entry((record.image_id.clone(), record.key()))
            .or_default();
        entry.impressions += 1;
        entry.clicks += record.clicked as u64;
        Ok(())
    }

    pub fn records_seen(&self) -> usize {
        self.seen
    }

    pub fn merge(&mut self, other: Aggregator) {
        self.seen += other.seen;
        for (key, c) in other.counts {
            let entry = self.counts.entry(key).or_default();
            entry.impressions += c.impressions;
            entry.clicks += c.clicks;
        }
    }

    pub fn finish(self, min_impressions: u64) -> Result<Vec<AggregatedInstance>> {
        if min_impressions == 0 {
            return Err(Error::invalid("min_impressions must be at least 1"));
        }
        Ok(self
            .counts
            .into_iter()
            .filter(|(_, c)| c.impressions >= min_impressions)
            .map(|((image_id, attributes), c)| {
                AggregatedInstance::new(image_id, attributes, c.impressions, c.clicks)
            })
            .collect())
    }
}

/// Groups exposures by (image, attribute tuple) and computes CTR = clicks / impressions.
///
/// Keys with fewer than `min_impressions` exposures are dropped.
pub fn aggregate_logs(records: &[ClickLogRecord], min_impressions: u64) -> Result<Vec<AggregatedInstance>> {
    if records.is_empty() {
        return Err(Error::invalid("no click-log records to aggregate"));
    }
    if min_impressions == 0 {
        return Err(Error::invalid("min_impressions must be at least 1"));
    }
    let mut agg = Aggregator::new();
    for r in records {
        agg.push(r)?;
    }
    agg.finish(min_impressions)
}
