//! Segment-level train/test partitioning.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::stack::{LabelMap, Sample};
use crate::error::{Error, Result};

/// Minimum number of test segments per class.
pub const MIN_TEST_SEGMENTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// `true` for test segments.
    pub test: BTreeMap<u32, bool>,
}

impl SplitAssignment {
    pub fn is_test(&self, segment: u32) -> bool {
        self.test.get(&segment).copied().unwrap_or(false)
    }

    pub fn train_segments(&self) -> BTreeSet<u32> {
        self.test.iter().filter(|(_, &t)| !t).map(|(&s, _)| s).collect()
    }

    pub fn test_segments(&self) -> BTreeSet<u32> {
        self.test.iter().filter(|(_, &t)| t).map(|(&s, _)| s).collect()
    }

    pub fn train_samples(&self, labels: &LabelMap) -> Vec<Sample> {
        let train = self.train_segments();
        labels.samples_in(|s| train.contains(&s))
    }

    pub fn test_samples(&self, labels: &LabelMap) -> Vec<Sample> {
        let test = self.test_segments();
        labels.samples_in(|s| test.contains(&s))
    }
}

fn segments_per_class(labels: &LabelMap) -> Result<Vec<Vec<u32>>> {
    let mut per_class = vec![Vec::new(); labels.num_classes()];
    for (seg, class) in labels.segment_classes()? {
        per_class[class].push(seg);
    }
    Ok(per_class)
}

/// Splits segments so that about `train_ratio` of each class trains and the
/// rest (at least [`MIN_TEST_SEGMENTS`] per class) tests.
///
/// Each class is shuffled independently with a generator seeded from `seed`.
pub fn split_segments(labels: &LabelMap, train_ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if !(0.0..1.0).contains(&train_ratio) {
        return Err(Error::config(format!("train ratio must lie in [0, 1), got {train_ratio}")));
    }
    let per_class = segments_per_class(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = BTreeMap::new();
    for (class, segs) in per_class.iter().enumerate() {
        if segs.len() < MIN_TEST_SEGMENTS + 1 {
            return Err(Error::SplitInfeasible { class, segments: segs.len() });
        }
        let mut order = segs.clone();
        order.shuffle(&mut rng);
        let target = ((1.0 - train_ratio) * segs.len() as f64).round() as usize;
        let n_test = target.max(MIN_TEST_SEGMENTS).min(segs.len() - 1);
        for (i, &s) in order.iter().enumerate() {
            test.insert(s, i < n_test);
        }
    }
    Ok(SplitAssignment { test })
}

/// Sets aside about `fraction` of each class's training segments (at least
/// one when the class has two or more) as a validation slice.
///
/// Returns `(fit, validation)` segment sets; test segments are never touched.
pub fn validation_slice(
    labels: &LabelMap,
    split: &SplitAssignment,
    fraction: f64,
    seed: u64,
) -> Result<(BTreeSet<u32>, BTreeSet<u32>)> {
    let per_class = segments_per_class(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fit = BTreeSet::new();
    let mut val = BTreeSet::new();
    for segs in per_class {
        let mut train: Vec<u32> = segs.into_iter().filter(|&s| !split.is_test(s)).collect();
        train.shuffle(&mut rng);
        let n_val = if train.len() >= 2 { ((fraction * train.len() as f64).round() as usize).max(1) } else { 0 };
        for (i, s) in train.into_iter().enumerate() {
            if i < n_val {
                val.insert(s);
            } else {
                fit.insert(s);
            }
        }
    }
    Ok((fit, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One pixel per segment, `per_class` segments for each of `k` classes.
    fn labels(k: usize, per_class: usize) -> LabelMap {
        let n = k * per_class;
        LabelMap {
            height: 1,
            width: n,
            labels: (0..n).map(|i| (i % k) as u8).collect(),
            segments: (1..=n as u32).collect(),
            class_names: (0..k).map(|c| format!("c{c}")).collect(),
        }
    }

    #[test]
    fn ten_per_class_gives_two_test_segments() {
        let m = labels(4, 10);
        let split = split_segments(&m, 0.8, 3).unwrap();
        let classes = m.segment_classes().unwrap();
        for c in 0..4 {
            let n = split.test_segments().iter().filter(|s| classes[s] == c).count();
            assert_eq!(n, 2);
        }
    }

    #[test]
    fn seeded_split_is_reproducible() {
        let m = labels(3, 7);
        assert_eq!(split_segments(&m, 0.8, 9).unwrap(), split_segments(&m, 0.8, 9).unwrap());
    }

    #[test]
    fn too_few_segments() {
        let mut m = labels(2, 3);
        // class 1 loses a segment
        m.labels[5] = 0;
        match split_segments(&m, 0.8, 1) {
            Err(Error::SplitInfeasible { class: 1, segments: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn splits_are_segment_disjoint() {
        let m = labels(3, 9);
        let split = split_segments(&m, 0.8, 5).unwrap();
        let train = split.train_segments();
        assert!(split.test_segments().is_disjoint(&train));
        assert_eq!(split.train_samples(&m).len() + split.test_samples(&m).len(), 27);
        let (fit, val) = validation_slice(&m, &split, 0.1, 2).unwrap();
        assert!(fit.is_disjoint(&val));
        assert_eq!(fit.len() + val.len(), train.len());
        assert!(val.iter().all(|s| train.contains(s)));
        assert_eq!(val.len(), 3);
    }
}
