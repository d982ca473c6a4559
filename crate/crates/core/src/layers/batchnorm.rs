//! Per-channel batch normalization for `[N, C, H, W]` activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    /// Weight kept by the running statistics at each update.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { epsilon: DEFAULT_EPSILON, momentum: DEFAULT_MOMENTUM }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub config: BatchNormConfig,
    /// False until running statistics have been set or accumulated.
    pub initialized: bool,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0 and running variance 1.
    pub fn new(channels: usize, config: BatchNormConfig) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            config,
            initialized: true,
        }
    }

    /// Same as [`BatchNormParams::new`] but without usable running statistics;
    /// eval mode fails until a train-mode update has happened.
    pub fn untracked(channels: usize, config: BatchNormConfig) -> Self {
        BatchNormParams { initialized: false, ..Self::new(channels, config) }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds batch statistics from a train-mode forward into the running estimates.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        let Some(stats) = cache.batch_stats.as_ref() else { return };
        let m = T::from_f64(self.config.momentum);
        let one_m = T::one() - m;
        let first = !self.initialized;
        for c in 0..self.channels() {
            let (mean, var) = (stats.mean[c], stats.var[c]);
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = if first { mean } else { m * *rm + one_m * mean };
            let rv = &mut self.running_var.data_mut()[c];
            *rv = if first { var } else { m * *rv + one_m * var };
        }
        self.initialized = true;
    }
}

#[derive(Debug, Clone)]
struct BatchStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: Option<BatchStats<T>>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    if c != params.channels() {
        return Err(Error::config(format!("batch norm has {} channels, input has {c}", params.channels())));
    }
    let plane = h * w;
    let count = n * plane;
    let eps = T::from_f64(params.config.epsilon);
    let x = input.data();

    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::input(format!(
                    "train-mode batch norm needs at least 2 values per channel, got {count}"
                )));
            }
            let inv_count = T::one() / T::from_f64(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    s += x[off..off + plane].iter().fold(T::zero(), |a, &v| a + v);
                }
                let mu = s * inv_count;
                let mut sq = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sq += x[off..off + plane].iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
                }
                mean[ch] = mu;
                var[ch] = sq * inv_count;
            }
            let stats = BatchStats { mean: mean.clone(), var: var.clone() };
            (mean, var, Some(stats))
        }
        Mode::Eval => {
            if !params.initialized {
                return Err(Error::State("batch norm running statistics are uninitialized".into()));
            }
            (params.running_mean.data().to_vec(), params.running_var.data().to_vec(), None)
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    {
        let xh = xhat.data_mut();
        let o = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (mu, is) = (mean[ch], inv_std[ch]);
                let (g, be) = (params.gamma.data()[ch], params.beta.data()[ch]);
                for i in off..off + plane {
                    let v = (x[i] - mu) * is;
                    xh[i] = v;
                    o[i] = g * v + be;
                }
            }
        }
    }
    out.check_finite("batch norm output")?;
    Ok((out, BatchNormCache { xhat, inv_std, batch_stats }))
}

/// Backward pass. Train-mode caches propagate through the batch statistics;
/// eval-mode caches treat mean and variance as constants.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
    grad_output: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_output.shape() != cache.xhat.shape() {
        return Err(Error::shape(format!(
            "batch norm grad_output {:?}, expected {:?}",
            grad_output.shape(),
            cache.xhat.shape()
        )));
    }
    let (n, c, h, w) = grad_output.dims4()?;
    let plane = h * w;
    let count = T::from_f64((n * plane) as f64);
    let dy = grad_output.data();
    let xh = cache.xhat.data();

    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let mut sg = T::zero();
            let mut sb = T::zero();
            for i in off..off + plane {
                sg += dy[i] * xh[i];
                sb += dy[i];
            }
            dgamma.data_mut()[ch] += sg;
            dbeta.data_mut()[ch] += sb;
        }
    }

    let mut dx = Tensor::zeros(grad_output.shape());
    let d = dx.data_mut();
    for ch in 0..c {
        let g = params.gamma.data()[ch];
        let is = cache.inv_std[ch];
        if cache.batch_stats.is_some() {
            // dx = g * is / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
            let sum_dy = dbeta.data()[ch];
            let sum_dy_xhat = dgamma.data()[ch];
            let k = g * is / count;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    d[i] = k * (count * dy[i] - sum_dy - xh[i] * sum_dy_xhat);
                }
            }
        } else {
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    d[i] = g * is * dy[i];
                }
            }
        }
    }
    Ok(BatchNormGrads { input: dx, gamma: dgamma, beta: dbeta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(c: usize) -> BatchNormParams<f64> {
        BatchNormParams::new(c, BatchNormConfig::default())
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::filled(&[2, 1, 3, 3], 4.2);
        let (y, _) = batchnorm_forward(&x, &params(1), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_shifts_constant_input() {
        let mut p = params(1);
        p.beta.data_mut()[0] = 5.0;
        let x = Tensor::<f64>::filled(&[2, 1, 2, 2], -1.5);
        let (y, _) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn two_values_map_to_plus_minus_one() {
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &params(1), Mode::Train).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn train_mode_needs_two_values() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        assert!(matches!(batchnorm_forward(&x, &params(1), Mode::Train), Err(Error::Input(_))));
    }

    #[test]
    fn eval_requires_initialized_stats() {
        let p = BatchNormParams::<f64>::untracked(2, BatchNormConfig::default());
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(batchnorm_forward(&x, &p, Mode::Eval), Err(Error::State(_))));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = params(1);
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (_, cache) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        p.update_running(&cache);
        assert!((p.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((p.running_var.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.running_var.data().iter().all(|&v| v >= 0.0));

        let mut fresh = BatchNormParams::<f64>::untracked(1, BatchNormConfig::default());
        fresh.update_running(&cache);
        assert_eq!(fresh.running_mean.data(), &[2.0]);
        assert!(fresh.initialized);
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut p = params(1);
        p.running_mean.data_mut()[0] = 1.0;
        p.running_var.data_mut()[0] = 4.0 - 1e-5;
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![3.0, -1.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &p, Mode::Eval).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] + 1.0).abs() < 1e-12);
    }
}
