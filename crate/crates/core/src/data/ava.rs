//! Aesthetic-rating annotations: `<image id> <10 rating counts> <tag;tag;...>` per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::distribution::{ScoreDistribution, BUCKETS};
use super::split::hashed_selection;
use crate::error::{Error, Result};

pub const AVA_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvaEntry {
    pub image_id: String,
    pub distribution: ScoreDistribution,
    pub tags: Vec<String>,
    pub split: Split,
}

pub fn parse_ava_style(text: &str) -> Result<Vec<AvaEntry>> {
    let mut parsed = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut rest = line;
        let mut fields = Vec::with_capacity(BUCKETS + 1);
        for _ in 0..=BUCKETS {
            let (tok, tail) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
            if tok.is_empty() {
                return Err(Error::invalid(format!(
                    "annotation line {}: expected an id and {BUCKETS} counts",
                    lineno + 1
                )));
            }
            fields.push(tok);
            rest = tail.trim_start();
        }
        let counts = fields[1..]
            .iter()
            .map(|t| t.parse::<u64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("annotation line {}: {e}", lineno + 1)))?;
        let Some(distribution) = ScoreDistribution::from_counts(&counts)? else {
            log::warn!("annotation line {}: image {} has no ratings; skipped", lineno + 1, fields[0]);
            continue;
        };
        let tags = rest
            .split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect();
        parsed.push((fields[0].to_owned(), distribution, tags));
    }
    let ids: Vec<&str> = parsed.iter().map(|p| p.0.as_str()).collect();
    let train = hashed_selection(&ids, AVA_TRAIN_FRACTION);
    Ok(parsed
        .into_iter()
        .zip(train)
        .map(|((image_id, distribution, tags), is_train)| AvaEntry {
            image_id,
            distribution,
            tags,
            split: if is_train { Split::Train } else { Split::Test },
        })
        .collect())
}

/// Loads an annotation file; rows whose counts are all zero are skipped with a warning.
pub fn load_ava_style(path: &Path) -> Result<Vec<AvaEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_ava_style(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_counts_and_tags() {
        let text = "42 0 0 0 0 0 0 0 0 0 10 black and white;nature\n7 1 2 3 4 5 6 7 8 9 10 \n9 0 0 0 0 0 0 0 0 0 0 animal\n";
        let rows = parse_ava_style(text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].distribution, ScoreDistribution::point_mass(9));
        assert_eq!(rows[0].tags, vec!["black and white", "nature"]);
        assert!(rows[1].tags.is_empty());
        let oracle: f64 = (1..=10).map(|k| (k * k) as f64).sum::<f64>() / 55.0;
        assert!((rows[1].distribution.mean() - oracle).abs() < 1e-12);
    }

    #[test]
    fn eight_two_split_is_exact() {
        let text: String = (0..1000).map(|i| format!("{i} 1 1 1 1 1 1 1 1 1 1 tag\n")).collect();
        let rows = parse_ava_style(&text).unwrap();
        let train = rows.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!((train, rows.len() - train), (800, 200));
    }

    #[test]
    fn short_line_is_an_error() {
        assert!(parse_ava_style("1 2 3\n").is_err());
    }
}
