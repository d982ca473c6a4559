//! Timestamp ablation: one model per timestamp, pairwise diversity of their
//! validation predictions, and low-correlation subset selection.

use serde::{Deserialize, Serialize};

use crate::data::{validation_slice, Dataset, Sample, SplitAssignment};
use crate::error::{Error, Result};
use crate::eval::{average_accuracy, correlation, predict_samples};
use crate::net::NetworkSpec;
use crate::train::{train, CheckpointSink, TrainingConfig, TrainingSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Template network; `timestamps` is replaced for every model trained.
    pub spec: NetworkSpec,
    pub training: TrainingConfig,
    /// Subset sizes to select; empty means every size from 2 to the number
    /// of available timestamps.
    pub sizes: Vec<usize>,
    pub validation_fraction: f64,
    /// Exhaustive search is used while `C(n, m)` stays at or below this.
    pub exhaustive_limit: u64,
    /// Retrain and test a multi-temporal model on every selected subset.
    pub retrain: bool,
}

impl AblationConfig {
    pub fn new(spec: NetworkSpec, training: TrainingConfig) -> Self {
        AblationConfig {
            spec,
            training,
            sizes: Vec::new(),
            validation_fraction: 0.1,
            exhaustive_limit: 10_000,
            retrain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleReport {
    pub timestamp: usize,
    pub label: String,
    pub validation_average_accuracy: f64,
    pub test_average_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub size: usize,
    pub timestamps: Vec<usize>,
    pub labels: Vec<String>,
    pub mean_correlation: f64,
    pub selection: Selection,
    pub test_average_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Available timestamps, in stack order; rows and columns of `correlation`.
    pub available: Vec<usize>,
    pub singles: Vec<SingleReport>,
    /// Timestamps sorted by single-model validation accuracy, best first.
    pub ranking: Vec<usize>,
    pub correlation: Vec<Vec<f64>>,
    pub subsets: Vec<SubsetReport>,
}

impl AblationReport {
    /// Plain-text table of the selected subsets.
    pub fn table(&self) -> String {
        let mut s = String::from("size\tmean_correlation\ttest_average_accuracy\ttimestamps\n");
        for r in &self.subsets {
            let acc = r.test_average_accuracy.map_or("-".to_string(), |a| format!("{a:.2}"));
            s.push_str(&format!("{}\t{:.4}\t{}\t{}\n", r.size, r.mean_correlation, acc, r.labels.join(",")));
        }
        s
    }
}

/// Mean of `corr[i][j]` over all pairs in `set`.
pub fn mean_pairwise(corr: &[Vec<f64>], set: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in set.iter().enumerate() {
        for &j in &set[a + 1..] {
            sum += corr[i][j];
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u64) {
            Some(v) => v / (i as u64 + 1),
            None => return u64::MAX,
        };
    }
    acc
}

/// Picks `m` of the `corr.len()` models with the lowest mean pairwise
/// correlation. Exhaustive (lexicographically first minimum) when
/// `C(n, m) <= limit`; otherwise greedy forward selection starting from
/// `ranking[0]`.
pub fn select_subset(
    corr: &[Vec<f64>],
    m: usize,
    ranking: &[usize],
    limit: u64,
) -> Result<(Vec<usize>, f64, Selection)> {
    let n = corr.len();
    if m < 2 || m > n {
        return Err(Error::config(format!("subset size {m} must lie in 2..={n}")));
    }
    if binomial(n, m) <= limit {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut idx: Vec<usize> = (0..m).collect();
        loop {
            let score = mean_pairwise(corr, &idx);
            if best.as_ref().is_none_or(|(_, b)| score < *b) {
                best = Some((idx.clone(), score));
            }
            // next combination in lexicographic order
            let Some(i) = (0..m).rev().find(|&i| idx[i] != i + n - m) else { break };
            idx[i] += 1;
            for k in i + 1..m {
                idx[k] = idx[k - 1] + 1;
            }
        }
        let (set, score) = best.expect("at least one combination");
        return Ok((set, score, Selection::Exhaustive));
    }
    let mut set = vec![*ranking.first().ok_or_else(|| Error::input("empty ranking"))?];
    while set.len() < m {
        let next = (0..n)
            .filter(|c| !set.contains(c))
            .map(|c| {
                let mut s = set.clone();
                s.push(c);
                (c, mean_pairwise(corr, &s))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("candidates remain")
            .0;
        set.push(next);
    }
    set.sort_unstable();
    let score = mean_pairwise(corr, &set);
    Ok((set, score, Selection::Greedy))
}

fn with_timestamp(j: usize, e: Error) -> Error {
    Error::Timestamp { timestamp: j, source: Box::new(e) }
}

/// Trains a multi-temporal model on `timestamps` of the dataset and returns
/// its test average accuracy.
pub fn train_on_subset(
    dataset: &Dataset,
    timestamps: &[usize],
    spec: &NetworkSpec,
    training: &TrainingConfig,
    train_samples: &[Sample],
    test_samples: &[Sample],
) -> Result<f64> {
    let stack = dataset.stack.select(timestamps)?;
    let spec = NetworkSpec { timestamps: timestamps.len(), ..spec.clone() };
    let out =
        train(&spec, TrainingSet { stack: &stack, samples: train_samples }, training, &CheckpointSink::default())?;
    let preds = predict_samples(&out.checkpoint.params, &stack, test_samples, &stack.mask(), 256)?;
    let labels: Vec<usize> = test_samples.iter().map(|s| s.label).collect();
    average_accuracy(&preds, &labels, spec.num_classes)
}

/// Runs the full ablation on the training side of `split`; test segments
/// are only used to report accuracies.
pub fn ablate(dataset: &Dataset, split: &SplitAssignment, config: &AblationConfig) -> Result<AblationReport> {
    let stack = &dataset.stack;
    let labels_map = &dataset.labels;
    let available: Vec<usize> = (0..stack.len()).filter(|&j| stack.timestamps[j].available()).collect();
    let n = available.len();
    if n < 2 {
        return Err(Error::input(format!("ablation needs at least 2 available timestamps, got {n}")));
    }
    let sizes: Vec<usize> = if config.sizes.is_empty() { (2..=n).collect() } else { config.sizes.clone() };
    if let Some(&bad) = sizes.iter().find(|&&m| m < 2 || m > n) {
        return Err(Error::config(format!("subset size {bad} must lie in 2..={n}")));
    }

    let (fit, val) = validation_slice(labels_map, split, config.validation_fraction, config.training.seed)?;
    let fit_samples = labels_map.samples_in(|s| fit.contains(&s));
    let val_samples = labels_map.samples_in(|s| val.contains(&s));
    let train_samples = split.train_samples(labels_map);
    let test_samples = split.test_samples(labels_map);
    if val_samples.is_empty() {
        return Err(Error::input("validation slice is empty; more training segments are needed"));
    }
    let val_labels: Vec<usize> = val_samples.iter().map(|s| s.label).collect();
    let test_labels: Vec<usize> = test_samples.iter().map(|s| s.label).collect();
    let k = labels_map.num_classes();

    let single_spec = NetworkSpec { timestamps: 1, ..config.spec.clone() };
    let mut singles = Vec::with_capacity(n);
    let mut val_preds = Vec::with_capacity(n);
    for &j in &available {
        let run = || -> Result<(Vec<usize>, f64, f64)> {
            let sub = stack.select(&[j])?;
            // every single-timestamp model starts from the same seed, so
            // identical images give identical models
            let out = train(
                &single_spec,
                TrainingSet { stack: &sub, samples: &fit_samples },
                &config.training,
                &CheckpointSink::default(),
            )?;
            let params = &out.checkpoint.params;
            let vp = predict_samples(params, &sub, &val_samples, &sub.mask(), 256)?;
            let tp = predict_samples(params, &sub, &test_samples, &sub.mask(), 256)?;
            let va = average_accuracy(&vp, &val_labels, k)?;
            let ta = average_accuracy(&tp, &test_labels, k)?;
            Ok((vp, va, ta))
        };
        let (vp, va, ta) = run().map_err(|e| with_timestamp(j, e))?;
        log::info!("timestamp {j}: validation {va:.2}, test {ta:.2}");
        singles.push(SingleReport {
            timestamp: j,
            label: stack.timestamps[j].label.clone(),
            validation_average_accuracy: va,
            test_average_accuracy: ta,
        });
        val_preds.push(vp);
    }

    let mut corr = vec![vec![1.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let c = correlation(&val_preds[a], &val_preds[b])?;
            corr[a][b] = c;
            corr[b][a] = c;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| singles[b].validation_average_accuracy.total_cmp(&singles[a].validation_average_accuracy));
    let ranking: Vec<usize> = order.iter().map(|&i| available[i]).collect();

    let mut subsets = Vec::with_capacity(sizes.len());
    for &m in &sizes {
        let (set, score, selection) = select_subset(&corr, m, &order, config.exhaustive_limit)?;
        let timestamps: Vec<usize> = set.iter().map(|&i| available[i]).collect();
        let test_average_accuracy = if config.retrain {
            Some(train_on_subset(dataset, &timestamps, &config.spec, &config.training, &train_samples, &test_samples)?)
        } else {
            None
        };
        subsets.push(SubsetReport {
            size: m,
            labels: timestamps.iter().map(|&j| stack.timestamps[j].label.clone()).collect(),
            timestamps,
            mean_correlation: score,
            selection,
            test_average_accuracy,
        });
    }
    Ok(AblationReport { available, singles, ranking, correlation: corr, subsets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr_from(pairs: &[((usize, usize), f64)], n: usize) -> Vec<Vec<f64>> {
        let mut c = vec![vec![1.0; n]; n];
        for &((a, b), v) in pairs {
            c[a][b] = v;
            c[b][a] = v;
        }
        c
    }

    #[test]
    fn exhaustive_matches_brute_force() {
        let n = 6;
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                pairs.push(((a, b), ((a * 7 + b * 3) % 11) as f64 / 11.0));
            }
        }
        let c = corr_from(&pairs, n);
        for m in 2..=n {
            let (set, score, sel) = select_subset(&c, m, &[0], 10_000).unwrap();
            assert_eq!(sel, Selection::Exhaustive);
            // brute force over bit masks
            let best = (0u32..1 << n)
                .filter(|mask| mask.count_ones() as usize == m)
                .map(|mask| {
                    let s: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                    mean_pairwise(&c, &s)
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(score, best);
            assert_eq!(set.len(), m);
        }
    }

    #[test]
    fn two_timestamps_force_the_pair() {
        let c = corr_from(&[((0, 1), 0.3)], 2);
        assert_eq!(select_subset(&c, 2, &[1, 0], 10_000).unwrap().0, vec![0, 1]);
    }

    #[test]
    fn greedy_starts_from_the_best_single() {
        let c = corr_from(&[((0, 1), 0.9), ((0, 2), 0.2), ((1, 2), 0.5)], 3);
        let (set, _, sel) = select_subset(&c, 2, &[1, 0, 2], 0).unwrap();
        assert_eq!(sel, Selection::Greedy);
        assert_eq!(set, vec![1, 2]);
    }

    #[test]
    fn duplicate_pair_is_avoided() {
        // 0 and 1 are copies of each other
        let c = corr_from(&[((0, 1), 1.0), ((0, 2), 0.6), ((1, 2), 0.6)], 3);
        let (set, _, _) = select_subset(&c, 2, &[0, 1, 2], 10_000).unwrap();
        assert!(set.contains(&2));
        assert!(select_subset(&c, 4, &[0], 10).is_err());
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(12, 6), 924);
        assert_eq!(binomial(40, 20), 137_846_528_820);
        assert_eq!(binomial(5, 0), 1);
    }
}
