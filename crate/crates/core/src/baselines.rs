//! Hand-crafted temporal baseline: per-pixel series -> recurrence plot ->
//! LBP histogram -> linear softmax classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, TemporalImageStack};
use crate::error::{Error, Result};
use crate::layers::{argmax, dense_backward, dense_forward, softmax_cross_entropy_batch, DenseParams};
use crate::net::{AvailabilityMask, ParamKind};
use crate::tensor::Tensor;
use crate::train::{sgd_step, TrainingConfig};

pub const LBP_BINS: usize = 256;

/// Fraction of the largest pairwise distance used as the default threshold.
pub const DEFAULT_EPS_FRACTION: f64 = 0.1;

/// Values of one pixel over time.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSeries {
    /// `values[j]` holds the channel values at timestamp `j` (empty when unavailable).
    pub values: Vec<Vec<f64>>,
    pub available: Vec<bool>,
}

impl PixelSeries {
    pub fn from_stack(stack: &TemporalImageStack, x: usize, y: usize, mask: &AvailabilityMask) -> Result<Self> {
        if mask.len() != stack.len() {
            return Err(Error::input(format!("mask of {} for a stack of {}", mask.len(), stack.len())));
        }
        let mut values = Vec::with_capacity(stack.len());
        let mut available = Vec::with_capacity(stack.len());
        for j in 0..stack.len() {
            if mask.is_available(j) && stack.timestamps[j].available() {
                values
                    .push((0..stack.channels).map(|c| stack.pixel(j, c, x, y).map(f64::from)).collect::<Result<_>>()?);
                available.push(true);
            } else {
                values.push(Vec::new());
                available.push(false);
            }
        }
        Ok(PixelSeries { values, available })
    }

    fn available_points(&self) -> Vec<&[f64]> {
        self.values.iter().zip(&self.available).filter(|(_, &a)| a).map(|(v, _)| v.as_slice()).collect()
    }
}

/// Binary `n x n` matrix over the `n` available timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrencePlot {
    pub size: usize,
    pub eps: f64,
    /// Row-major 0/1 entries.
    pub matrix: Vec<u8>,
}

impl RecurrencePlot {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.matrix[i * self.size + j]
    }
}

/// Euclidean distance; terms are summed in sorted order so the result does
/// not depend on channel order.
fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut terms: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().sqrt()
}

/// `R[i, j] = 1` iff the series values at `i` and `j` lie within `eps`
/// (Euclidean). Without `eps`, a tenth of the largest pairwise distance is used.
pub fn recurrence_plot(series: &PixelSeries, eps: Option<f64>) -> Result<RecurrencePlot> {
    let pts = series.available_points();
    let n = pts.len();
    if n < 2 {
        return Err(Error::input(format!("recurrence plot needs 2 available timestamps, got {n}")));
    }
    let mut dist = vec![0.0; n * n];
    let mut max = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(pts[i], pts[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
            max = max.max(d);
        }
    }
    let eps = eps.unwrap_or(DEFAULT_EPS_FRACTION * max);
    if !(eps >= 0.0) {
        return Err(Error::input(format!("eps must be non-negative, got {eps}")));
    }
    let matrix = dist.iter().map(|&d| u8::from(d <= eps)).collect();
    Ok(RecurrencePlot { size: n, eps, matrix })
}

/// Clockwise from the top-left neighbor; neighbor `i` sets bit `i`.
const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];

/// LBP code of every interior cell of a row-major `h x w` input.
pub fn lbp_codes(input: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if h < 3 || w < 3 || input.len() != h * w {
        return Err(Error::input(format!("LBP needs at least a 3x3 input, got {h}x{w} ({} values)", input.len())));
    }
    let mut codes = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let center = input[y * w + x];
            let mut code = 0u8;
            for (bit, (dy, dx)) in NEIGHBORS.iter().enumerate() {
                let v = input[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                if v >= center {
                    code |= 1 << bit;
                }
            }
            codes.push(code);
        }
    }
    Ok(codes)
}

/// 256-bin LBP histogram normalized to sum 1.
pub fn lbp_histogram(input: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let codes = lbp_codes(input, h, w)?;
    let mut hist = vec![0.0; LBP_BINS];
    for &c in &codes {
        hist[c as usize] += 1.0;
    }
    let n = codes.len() as f64;
    hist.iter_mut().for_each(|v| *v /= n);
    Ok(hist)
}

/// LBP histogram of a recurrence plot.
pub fn rp_descriptor(plot: &RecurrencePlot) -> Result<Vec<f64>> {
    let m: Vec<f64> = plot.matrix.iter().map(|&v| v as f64).collect();
    lbp_histogram(&m, plot.size, plot.size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig { epochs: 100, batch_size: 32, learning_rate: 0.05, momentum: 0.9, weight_decay: 1e-4, seed: 0 }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub layer: DenseParams<f64>,
}

impl LinearClassifier {
    /// Fits with mini-batch SGD. Samples are put in a canonical order first,
    /// so the model depends on the training set but not on its order.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], num_classes: usize, config: &LinearConfig) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::input("need as many labels as feature vectors, and at least one"));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::input("feature vectors differ in length"));
        }
        let mut seen = vec![false; num_classes];
        for &l in labels {
            *seen.get_mut(l).ok_or_else(|| Error::input(format!("label {l} outside {num_classes} classes")))? = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(Error::config("linear classifier needs samples of at least two classes"));
        }

        let mut order: Vec<usize> = (0..features.len()).collect();
        order.sort_by(|&a, &b| {
            labels[a].cmp(&labels[b]).then_with(|| {
                let (fa, fb) = (&features[a], &features[b]);
                fa.iter().zip(fb).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|d| order.iter().map(|&i| features[i][d]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|d| {
                let var = order.iter().map(|&i| (features[i][d] - mean[d]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut clf = LinearClassifier {
            mean,
            scale,
            layer: DenseParams { weights: Tensor::zeros(&[num_classes, dim]), bias: Tensor::zeros(&[num_classes]) },
        };
        let x: Vec<Vec<f64>> = features.iter().map(|f| clf.standardize(f)).collect();

        let tc = TrainingConfig {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            ..TrainingConfig::default()
        };
        let kinds = [ParamKind::Weight, ParamKind::Bias];
        let mut vel = vec![Tensor::zeros(&[num_classes, dim]), Tensor::zeros(&[num_classes])];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let data: Vec<f64> = chunk.iter().flat_map(|&i| x[i].iter().copied()).collect();
                let input = Tensor::from_vec(&[chunk.len(), dim], data)?;
                let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let logits = dense_forward(&input, &clf.layer)?;
                let loss = softmax_cross_entropy_batch(&logits, &batch_labels)?;
                let g = dense_backward(&input, &clf.layer, &loss.grad)?;
                let DenseParams { weights, bias } = &mut clf.layer;
                sgd_step(&mut [weights, bias], &[&g.weights, &g.bias], &kinds, &mut vel, config.learning_rate, &tc)?;
            }
        }
        Ok(clf)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let dim = self.mean.len();
        let data: Vec<f64> = features.iter().flat_map(|f| self.standardize(f)).collect();
        let input = Tensor::from_vec(&[features.len(), dim], data)?;
        let logits = dense_forward(&input, &self.layer)?;
        Ok(logits.data().chunks_exact(self.layer.bias.len()).map(argmax).collect())
    }
}

/// Recurrence-plot descriptors for `samples`.
pub fn describe(
    stack: &TemporalImageStack,
    samples: &[Sample],
    mask: &AvailabilityMask,
    eps: Option<f64>,
) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let series = PixelSeries::from_stack(stack, s.x, s.y, mask)?;
            rp_descriptor(&recurrence_plot(&series, eps)?)
        })
        .collect()
}

/// The full hand-crafted pipeline.
#[derive(Debug, Clone)]
pub struct RecurrenceBaseline {
    pub eps: Option<f64>,
    pub classifier: LinearClassifier,
}

impl RecurrenceBaseline {
    pub fn fit(
        stack: &TemporalImageStack,
        samples: &[Sample],
        num_classes: usize,
        eps: Option<f64>,
        config: &LinearConfig,
    ) -> Result<Self> {
        let features = describe(stack, samples, &stack.mask(), eps)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Ok(RecurrenceBaseline { eps, classifier: LinearClassifier::fit(&features, &labels, num_classes, config)? })
    }

    pub fn predict(
        &self,
        stack: &TemporalImageStack,
        samples: &[Sample],
        mask: &AvailabilityMask,
    ) -> Result<Vec<usize>> {
        self.classifier.predict(&describe(stack, samples, mask, self.eps)?)
    }
}
