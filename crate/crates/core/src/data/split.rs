//! Deterministic hash-ranked splits with exact group sizes.

use sha2::{Digest, Sha256};

fn rank_key(id: &str) -> [u8; 32] {
    Sha256::digest(id.as_bytes()).into()
}

/// Marks exactly `floor(fraction · n)` ids as selected: those with the smallest SHA-256 digests
/// (ties broken by position).
pub fn hashed_selection<S: AsRef<str>>(ids: &[S], fraction: f64) -> Vec<bool> {
    let n = ids.len();
    let take = ((fraction.clamp(0.0, 1.0) * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<(usize, [u8; 32])> = ids.iter().enumerate().map(|(i, id)| (i, rank_key(id.as_ref()))).collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut selected = vec![false; n];
    for &(i, _) in &order[..take] {
        selected[i] = true;
    }
    selected
}
