//! Metrics, batched prediction and classification maps.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::manifest::write_png8;
use crate::data::{extract_timestamps, LabelMap, Sample, TemporalImageStack, BACKGROUND};
use crate::error::{Error, Result};
use crate::layers::argmax;
use crate::net::{AvailabilityMask, NetworkParams};
use crate::tensor::Tensor;

/// Mean of per-class recalls, in percent.
///
/// Pixels labeled [`BACKGROUND`] are ignored, and so are classes without any
/// labeled pixel.
pub fn average_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    Confusion::new(predictions, labels, num_classes)?.average_accuracy()
}

/// Fraction of positions where two prediction vectors differ.
pub fn disagreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!("prediction vectors differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::input("cannot compare empty prediction vectors"));
    }
    let differ = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(differ as f64 / a.len() as f64)
}

/// `1 - disagreement(a, b)`.
pub fn correlation(a: &[usize], b: &[usize]) -> Result<f64> {
    Ok(1.0 - disagreement(a, b)?)
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::input(format!("{} predictions for {} labels", predictions.len(), labels.len())));
        }
        let mut matrix = vec![vec![0u64; num_classes]; num_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if l == BACKGROUND as usize {
                continue;
            }
            if l >= num_classes || p >= num_classes {
                return Err(Error::input(format!("class index out of range: label {l}, prediction {p}")));
            }
            matrix[l][p] += 1;
        }
        Ok(Confusion { matrix })
    }

    pub fn counts(&self) -> Vec<u64> {
        self.matrix.iter().map(|r| r.iter().sum()).collect()
    }

    /// Per-class recall; `None` for classes without labeled pixels.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.matrix
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect()
    }

    pub fn average_accuracy(&self) -> Result<f64> {
        let present: Vec<f64> = self.recalls().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::input("no labeled pixel to evaluate"));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64 * 100.0)
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total: u64 = self.counts().iter().sum();
        let correct: u64 = (0..self.matrix.len()).map(|c| self.matrix[c][c]).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64 * 100.0
        }
    }

    /// CSV with a header row of class names.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("true\\predicted");
        for n in class_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, row) in class_names.iter().zip(&self.matrix) {
            s.push_str(name);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub class_names: Vec<String>,
    pub confusion: Confusion,
    pub recall: Vec<Option<f64>>,
    pub counts: Vec<u64>,
    pub average_accuracy: f64,
    pub overall_accuracy: f64,
    /// Classes left out of the average because they had no labeled pixel.
    pub excluded_classes: Vec<usize>,
    pub warnings: Vec<String>,
    pub prediction_seconds: f64,
}

impl EvaluationReport {
    pub fn new(predictions: &[usize], labels: &[usize], class_names: &[String], seconds: f64) -> Result<Self> {
        let confusion = Confusion::new(predictions, labels, class_names.len())?;
        let recall = confusion.recalls();
        let excluded_classes: Vec<usize> =
            recall.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(c, _)| c).collect();
        let warnings = excluded_classes
            .iter()
            .map(|&c| format!("class {c} ({}) has no labeled pixel and is excluded", class_names[c]))
            .collect::<Vec<_>>();
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(EvaluationReport {
            class_names: class_names.to_vec(),
            average_accuracy: confusion.average_accuracy()?,
            overall_accuracy: confusion.overall_accuracy(),
            counts: confusion.counts(),
            recall,
            confusion,
            excluded_classes,
            warnings,
            prediction_seconds: seconds,
        })
    }
}

/// Eval-mode predictions for `samples`, using only timestamps available in
/// both `mask` and the stack.
pub fn predict_samples(
    params: &NetworkParams<f32>,
    stack: &TemporalImageStack,
    samples: &[Sample],
    mask: &AvailabilityMask,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let spec = &params.spec;
    if stack.len() != spec.timestamps || stack.channels != spec.channels_per_branch {
        return Err(Error::input(format!(
            "network expects {} timestamps of {} channels, stack has {} of {}",
            spec.timestamps,
            spec.channels_per_branch,
            stack.len(),
            stack.channels
        )));
    }
    if mask.len() != stack.len() {
        return Err(Error::input(format!("mask of {} for a stack of {}", mask.len(), stack.len())));
    }
    let effective =
        AvailabilityMask::from_flags(mask.flags.iter().zip(&stack.mask().flags).map(|(&a, &b)| a && b).collect());
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let windows = extract_timestamps(stack, chunk, &effective, spec.window_size)?;
        let refs: Vec<Option<&Tensor<f32>>> = windows.iter().map(Option::as_ref).collect();
        let logits = params.inference_branch_drop(&refs, &effective)?;
        let k = spec.num_classes;
        out.extend(logits.data().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

/// Predicts `samples` and scores them against their labels.
pub fn evaluate(
    params: &NetworkParams<f32>,
    stack: &TemporalImageStack,
    samples: &[Sample],
    mask: &AvailabilityMask,
    class_names: &[String],
) -> Result<(EvaluationReport, Vec<usize>)> {
    let start = Instant::now();
    let preds = predict_samples(params, stack, samples, mask, 256)?;
    let seconds = start.elapsed().as_secs_f64();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok((EvaluationReport::new(&preds, &labels, class_names, seconds)?, preds))
}

/// Predicted classes over the whole image: [`BACKGROUND`] off the
/// annotation, the predicted class on every annotated pixel.
pub fn predict_map(
    params: &NetworkParams<f32>,
    stack: &TemporalImageStack,
    labels: &LabelMap,
    mask: &AvailabilityMask,
) -> Result<Vec<u8>> {
    if (labels.height, labels.width) != (stack.height, stack.width) {
        return Err(Error::input("label map and stack differ in size"));
    }
    let samples = labels.annotated();
    let preds = predict_samples(params, stack, &samples, mask, 256)?;
    let mut map = vec![BACKGROUND; labels.height * labels.width];
    for (s, p) in samples.iter().zip(preds) {
        map[s.y * labels.width + s.x] = p as u8;
    }
    Ok(map)
}

/// RGB rendering of a predicted map: palette colors for classes, black for
/// background.
pub fn render_map(map: &[u8], palette: &[[u8; 3]]) -> Vec<u8> {
    map.iter()
        .flat_map(
            |&c| if c == BACKGROUND { [0, 0, 0] } else { palette.get(c as usize).copied().unwrap_or([255, 255, 255]) },
        )
        .collect()
}

pub fn write_map_png(path: &Path, map: &[u8], width: usize, height: usize, palette: &[[u8; 3]]) -> Result<()> {
    write_png8(path, width, height, 3, &render_map(map, palette))
}
