use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Softmax probabilities and `-ln p[label]` for one row of logits.
///
/// The maximum logit is subtracted before exponentiating.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::input(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let shifted: Vec<T> = logits.iter().map(|&v| v - max).collect();
    let log_sum = shifted.iter().fold(T::zero(), |a, &v| a + v.exp()).ln();
    let probs: Vec<T> = shifted.iter().map(|&v| (v - log_sum).exp()).collect();
    let loss = log_sum - shifted[label];
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross-entropy loss is {loss}")));
    }
    Ok((loss, probs))
}

#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    /// Mean loss over the batch.
    pub loss: T,
    pub probs: Tensor<T>,
    /// Gradient of the mean loss with respect to the logits.
    pub grad: Tensor<T>,
    pub correct: usize,
}

pub fn softmax_cross_entropy_batch<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<BatchLoss<T>> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::input(format!("{} labels for a batch of {n}", labels.len())));
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut total = T::zero();
    let mut probs = Tensor::zeros(&[n, k]);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let (loss, p) = softmax_cross_entropy(row, label)?;
        total += loss;
        if argmax(row) == label {
            correct += 1;
        }
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, (&pj, gj)) in p.iter().zip(g.iter_mut()).enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            *gj = (pj - target) * inv_n;
        }
        probs.data_mut()[i * k..(i + 1) * k].copy_from_slice(&p);
    }
    Ok(BatchLoss { loss: total * inv_n, probs, grad, correct })
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_two() {
        let (loss, p) = softmax_cross_entropy(&[0.0f64, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn large_logits_stay_finite() {
        let (loss, p) = softmax_cross_entropy(&[1000.0f32, 0.0, -1000.0], 2).unwrap();
        assert!((loss - 2000.0).abs() < 1e-3);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bad_label() {
        assert!(softmax_cross_entropy(&[0.0f32, 1.0], 2).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_are_normalized_and_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 2..10),
            shift in -50.0f64..50.0,
        ) {
            let label = logits.len() - 1;
            let (loss, p) = softmax_cross_entropy(&logits, label).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let (loss2, p2) = softmax_cross_entropy(&shifted, label).unwrap();
            prop_assert!((loss - loss2).abs() < 1e-6);
            for (a, b) in p.iter().zip(&p2) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
