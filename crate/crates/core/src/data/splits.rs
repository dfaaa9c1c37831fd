//! Train/dev/test assembly for counting questions drawn from VQA and Visual Genome.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::filter::{filter_howmany, FilterReason};
use super::scene::QaRecord;
use super::vqa::RawQa;
use crate::counters::derive_rng;
use crate::error::{Error, Result};

/// Size of the seeded test draw used when no manifest is supplied.
pub const DEFAULT_TEST_SIZE: usize = 5000;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterHistogram {
    pub counts: BTreeMap<FilterReason, usize>,
}

impl FilterHistogram {
    pub fn record(&mut self, reason: FilterReason) {
        *self.counts.entry(reason).or_default() += 1;
    }

    pub fn get(&self, reason: FilterReason) -> usize {
        self.counts.get(&reason).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn merge(&mut self, other: &FilterHistogram) {
        for (&r, &n) in &other.counts {
            *self.counts.entry(r).or_default() += n;
        }
    }
}

/// Runs the count filter over raw pairs.
pub fn filter_pairs(pairs: Vec<RawQa>) -> Result<(Vec<QaRecord>, Vec<(u64, FilterReason)>, FilterHistogram)> {
    let mut kept = Vec::new();
    let mut decisions = Vec::with_capacity(pairs.len());
    let mut hist = FilterHistogram::default();
    for p in pairs {
        let reason = filter_howmany(&p.question, &p.consensus);
        hist.record(reason);
        decisions.push((p.question_id, reason));
        if reason == FilterReason::Keep {
            kept.push(p.into_record()?);
        }
    }
    Ok((kept, decisions, hist))
}

#[derive(Clone, Debug, Default)]
pub struct SplitInputs {
    pub vqa_train: Vec<RawQa>,
    pub vqa_val: Vec<RawQa>,
    pub vg: Vec<RawQa>,
    /// Published test question ids. Remaining filtered validation questions become dev.
    pub test_manifest: Option<Vec<u64>>,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HowManySplits {
    pub train: Vec<QaRecord>,
    pub dev: Vec<QaRecord>,
    pub test: Vec<QaRecord>,
    /// Kept VQA training pairs (before adding Visual Genome).
    pub train_from_vqa: usize,
    pub train_from_vg: usize,
    pub histogram: FilterHistogram,
}

/// Builds the counting splits.
pub fn build_howmany_splits(inputs: SplitInputs) -> Result<HowManySplits> {
    let train_images: HashSet<u64> = inputs.vqa_train.iter().map(|q| q.image_id).collect();
    let (mut train, _, mut histogram) = filter_pairs(inputs.vqa_train)?;
    let train_from_vqa = train.len();

    // Every input pair is classified so the histogram covers the whole input.
    let (vg_kept, _, vg_hist) = filter_pairs(inputs.vg)?;
    let vg_kept: Vec<QaRecord> = vg_kept
        .into_iter()
        .filter(|q| q.image_id.parse().is_ok_and(|id: u64| train_images.contains(&id)))
        .collect();
    let train_from_vg = vg_kept.len();
    train.extend(vg_kept);
    histogram.merge(&vg_hist);

    let (val, _, val_hist) = filter_pairs(inputs.vqa_val)?;
    histogram.merge(&val_hist);

    let (dev, test) = match inputs.test_manifest {
        Some(ids) => {
            let available: HashSet<u64> = val.iter().map(|q| q.question_id).collect();
            if let Some(bad) = ids.iter().find(|id| !available.contains(id)) {
                return Err(Error::MissingKey(format!(
                    "test manifest question id {bad} is not a kept validation question"
                )));
            }
            let wanted: HashSet<u64> = ids.into_iter().collect();
            val.into_iter().partition::<Vec<_>, _>(|q| !wanted.contains(&q.question_id))
        }
        None => {
            let mut order: Vec<usize> = (0..val.len()).collect();
            order.shuffle(&mut derive_rng(inputs.seed, 0x5e1ec7, 0));
            let chosen: HashSet<usize> = order.into_iter().take(inputs.test_size).collect();
            let mut dev = Vec::new();
            let mut test = Vec::new();
            for (i, q) in val.into_iter().enumerate() {
                if chosen.contains(&i) {
                    test.push(q);
                } else {
                    dev.push(q);
                }
            }
            (dev, test)
        }
    };

    check_disjoint(&train, &dev, &test)?;
    Ok(HowManySplits { train, dev, test, train_from_vqa, train_from_vg, histogram })
}

/// Question ids must be unique across splits, and no training image may appear in dev or test.
pub fn check_disjoint(train: &[QaRecord], dev: &[QaRecord], test: &[QaRecord]) -> Result<()> {
    let mut ids = HashSet::new();
    for q in train.iter().chain(dev).chain(test) {
        if !ids.insert(q.question_id) {
            return Err(Error::InvalidArgument(format!("question id {} appears twice", q.question_id)));
        }
    }
    let train_images: HashSet<&str> = train.iter().map(|q| q.image_id.as_str()).collect();
    if let Some(q) = dev.iter().chain(test).find(|q| train_images.contains(q.image_id.as_str())) {
        return Err(Error::InvalidArgument(format!(
            "image {} of held-out question {} is also used for training",
            q.image_id, q.question_id
        )));
    }
    Ok(())
}
