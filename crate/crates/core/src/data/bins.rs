//! Grouping evaluation questions by how common their subject was in training.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const NUM_BINS: usize = 6;
/// Bin for subjects never seen in training.
pub const UNSEEN_BIN: usize = NUM_BINS - 1;

/// Bin index (`0..=5`) per evaluation subject. Seen subjects are ordered by
/// descending training frequency and split into five near-equal quantile bins;
/// questions whose subjects share a frequency always land in the same bin.
pub fn frequency_bins<S: AsRef<str>>(train_subjects: &[S], eval_subjects: &[S]) -> Result<Vec<usize>> {
    if train_subjects.is_empty() {
        return Err(Error::Empty("training split for frequency bins"));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in train_subjects {
        *freq.entry(s.as_ref()).or_default() += 1;
    }
    let mut bins = vec![UNSEEN_BIN; eval_subjects.len()];
    let mut seen: Vec<(usize, usize)> = eval_subjects
        .iter()
        .enumerate()
        .filter_map(|(i, s)| freq.get(s.as_ref()).map(|&f| (i, f)))
        .collect();
    // Stable sort keeps the original order inside a frequency group.
    seen.sort_by(|a, b| b.1.cmp(&a.1));
    let m = seen.len();
    let quantiles = UNSEEN_BIN;
    let mut pos = 0;
    while pos < m {
        let f = seen[pos].1;
        let end = pos + seen[pos..].iter().take_while(|e| e.1 == f).count();
        let bin = (pos * quantiles / m).min(quantiles - 1);
        for e in &seen[pos..end] {
            bins[e.0] = bin;
        }
        pos = end;
    }
    Ok(bins)
}
