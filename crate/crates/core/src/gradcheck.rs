//! Central finite-difference checks of every hand-written backward pass.
//!
//! Everything here runs in `f64`. Each check reduces the layer output to a
//! scalar through a fixed random projection, perturbs every input and
//! parameter by `±h`, and compares the numeric slope with the analytic
//! gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward, dense_forward,
    dropout_backward, dropout_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    softmax_cross_entropy_batch, BatchNormConfig, BatchNormParams, DenseParams, Mode,
};
use crate::net::{build, AvailabilityMask, ConvStage, InputLayout, NetworkParams, NetworkSpec, ParamKind};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
/// Gradient components smaller than this are compared in absolute terms.
pub const DENOMINATOR_FLOOR: f64 = 1e-4;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x0`.
pub fn compare<F: FnMut(&[f64]) -> f64>(x0: &[f64], analytic: &[f64], step: f64, mut f: F) -> f64 {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn with(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), data.to_vec()).expect("same shape")
}

fn record(name: &str, errors: &[(usize, f64)], tolerance: f64) -> GradCheck {
    GradCheck {
        name: name.to_string(),
        checked: errors.iter().map(|e| e.0).sum(),
        max_relative_error: errors.iter().map(|e| e.1).fold(0.0, f64::max),
        tolerance,
    }
}

pub fn check_dense(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[3, 4], &mut rng, -1.0, 1.0);
    let p = DenseParams { weights: random(&[5, 4], &mut rng, -1.0, 1.0), bias: random(&[5], &mut rng, -1.0, 1.0) };
    let r = random(&[3, 5], &mut rng, -1.0, 1.0);
    let g = dense_backward(&x, &p, &r)?;
    let loss = |x: &Tensor<f64>, p: &DenseParams<f64>| project(&dense_forward(x, p).unwrap(), &r);
    let ex = compare(x.data(), g.input.data(), STEP, |d| loss(&with(&x, d), &p));
    let ew = compare(p.weights.data(), g.weights.data(), STEP, |d| {
        loss(&x, &DenseParams { weights: with(&p.weights, d), bias: p.bias.clone() })
    });
    let eb = compare(p.bias.data(), g.bias.data(), STEP, |d| {
        loss(&x, &DenseParams { weights: p.weights.clone(), bias: with(&p.bias, d) })
    });
    Ok(record("dense", &[(x.len(), ex), (p.weights.len(), ew), (p.bias.len(), eb)], 1e-6))
}

pub fn check_conv(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[1, 3, 8, 8], &mut rng, -1.0, 1.0);
    let w = random(&[2, 3, 4, 4], &mut rng, -0.5, 0.5);
    let b = random(&[2], &mut rng, -0.5, 0.5);
    let mut errors = Vec::new();
    for stride in [(1, 1), (2, 2)] {
        let (y, cache) = conv2d_forward(&x, &w, &b, stride)?;
        let r = random(y.shape(), &mut rng, -1.0, 1.0);
        let g = conv2d_backward(&cache, &w, &r, true)?;
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            project(&conv2d_forward(x, w, b, stride).unwrap().0, &r)
        };
        let gi = g.input.as_ref().expect("requested");
        errors.push((x.len(), compare(x.data(), gi.data(), STEP, |d| loss(&with(&x, d), &w, &b))));
        errors.push((w.len(), compare(w.data(), g.weights.data(), STEP, |d| loss(&x, &with(&w, d), &b))));
        errors.push((b.len(), compare(b.data(), g.bias.data(), STEP, |d| loss(&x, &w, &with(&b, d)))));
    }
    Ok(record("conv2d", &errors, LAYER_TOLERANCE))
}

pub fn check_maxpool(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, 2, 6, 6], &mut rng, -1.0, 1.0);
    let mut errors = Vec::new();
    for stride in [2, 1] {
        let (y, cache) = maxpool_forward(&x, (2, 2), (stride, stride))?;
        let r = random(y.shape(), &mut rng, -1.0, 1.0);
        let g = maxpool_backward(&cache, &r)?;
        let e = compare(x.data(), g.data(), STEP, |d| {
            project(&maxpool_forward(&with(&x, d), (2, 2), (stride, stride)).unwrap().0, &r)
        });
        errors.push((x.len(), e));
    }
    Ok(record("maxpool", &errors, LAYER_TOLERANCE))
}

pub fn check_batchnorm(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[3, 2, 3, 3], &mut rng, -2.0, 2.0);
    let mut p = BatchNormParams::new(2, BatchNormConfig::default());
    p.gamma = random(&[2], &mut rng, 0.5, 1.5);
    p.beta = random(&[2], &mut rng, -0.5, 0.5);
    p.running_mean = random(&[2], &mut rng, -0.2, 0.2);
    p.running_var = random(&[2], &mut rng, 0.5, 1.5);
    let mut errors = Vec::new();
    for mode in [Mode::Train, Mode::Eval] {
        let (y, cache) = batchnorm_forward(&x, &p, mode)?;
        let r = random(y.shape(), &mut rng, -1.0, 1.0);
        let g = batchnorm_backward(&cache, &p, &r)?;
        let loss = |x: &Tensor<f64>, p: &BatchNormParams<f64>| project(&batchnorm_forward(x, p, mode).unwrap().0, &r);
        errors.push((x.len(), compare(x.data(), g.input.data(), STEP, |d| loss(&with(&x, d), &p))));
        errors.push((
            2,
            compare(p.gamma.data(), g.gamma.data(), STEP, |d| {
                let mut q = p.clone();
                q.gamma = with(&p.gamma, d);
                loss(&x, &q)
            }),
        ));
        errors.push((
            2,
            compare(p.beta.data(), g.beta.data(), STEP, |d| {
                let mut q = p.clone();
                q.beta = with(&p.beta, d);
                loss(&x, &q)
            }),
        ));
    }
    Ok(record("batchnorm", &errors, LAYER_TOLERANCE))
}

pub fn check_relu(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep inputs away from the kink at zero
    let x = random(&[40], &mut rng, 0.05, 1.0).map(|v| if (v * 1e3) as i64 % 2 == 0 { v } else { -v });
    let r = random(&[40], &mut rng, -1.0, 1.0);
    let g = relu_backward(&x, &r)?;
    let e = compare(x.data(), g.data(), STEP, |d| project(&relu_forward(&with(&x, d)), &r));
    Ok(record("relu", &[(x.len(), e)], LAYER_TOLERANCE))
}

pub fn check_dropout(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[30], &mut rng, -1.0, 1.0);
    let r = random(&[30], &mut rng, -1.0, 1.0);
    let mask_seed = rng.gen::<u64>();
    let run = |x: &Tensor<f64>| {
        let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
        dropout_forward(x, 0.6, &mut mrng, Mode::Train).unwrap()
    };
    let (_, mask) = run(&x);
    let g = dropout_backward(&mask, &r)?;
    let e = compare(x.data(), g.data(), STEP, |d| project(&run(&with(&x, d)).0, &r));
    Ok(record("dropout", &[(x.len(), e)], LAYER_TOLERANCE))
}

pub fn check_softmax_cross_entropy(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random(&[4, 5], &mut rng, -3.0, 3.0);
    let labels = [0, 3, 4, 1];
    let g = softmax_cross_entropy_batch(&logits, &labels)?.grad;
    let e = compare(logits.data(), g.data(), STEP, |d| {
        softmax_cross_entropy_batch(&with(&logits, d), &labels).unwrap().loss
    });
    Ok(record("softmax_cross_entropy", &[(logits.len(), e)], LAYER_TOLERANCE))
}

/// Small two-timestamp network on 9x9 windows used by the end-to-end check.
pub fn tiny_network_spec() -> NetworkSpec {
    NetworkSpec {
        timestamps: 2,
        channels_per_branch: 2,
        num_classes: 3,
        window_size: 9,
        branch: ConvStage::new(3, 3, 2, 2),
        trunk: vec![ConvStage::new(4, 2, 2, 1), ConvStage::new(5, 1, 1, 1)],
        fc_sizes: vec![6],
        fc_keep_prob: 0.7,
        missing_data: false,
        share_branch_params: false,
        layout: InputLayout::Branched,
        batch_norm: BatchNormConfig::default(),
    }
}

/// Checks every learnable tensor of a full network in train mode (batch
/// statistics, fixed dropout masks) against finite differences of the mean
/// cross-entropy loss.
pub fn check_network(spec: &NetworkSpec, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: NetworkParams<f64> = build(spec, &mut rng)?;
    // zero biases can put a ReLU exactly on its kink
    let info = params.param_info();
    for (p, i) in params.params_mut().into_iter().zip(&info) {
        if i.kind != ParamKind::Weight {
            for v in p.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
    let n = 3;
    let ws = spec.window_size;
    let windows: Vec<Tensor<f64>> =
        (0..spec.timestamps).map(|_| random(&[n, spec.channels_per_branch, ws, ws], &mut rng, 0.0, 1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    let mask = AvailabilityMask::all(spec.timestamps);
    let drop_seed = rng.gen::<u64>();
    let refs: Vec<Option<&Tensor<f64>>> = windows.iter().map(Some).collect();

    let loss_of = |p: &NetworkParams<f64>| -> Result<(f64, crate::net::ForwardCache<f64>, Tensor<f64>)> {
        let mut drng = ChaCha8Rng::seed_from_u64(drop_seed);
        let (logits, cache) = p.forward(&refs, &mask, Mode::Train, &mut drng)?;
        let l = softmax_cross_entropy_batch(&logits, &labels)?;
        Ok((l.loss, cache, l.grad))
    };
    let (_, cache, grad_logits) = loss_of(&params)?;
    let grads = params.backward(&cache, &grad_logits)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();

    let mut errors = Vec::new();
    for (i, a) in analytic.iter().enumerate() {
        let base = params.params()[i].data().to_vec();
        let e = compare(&base, a, STEP, |d| {
            let mut q = params.clone();
            q.params_mut()[i].data_mut().copy_from_slice(d);
            loss_of(&q).expect("forward").0
        });
        errors.push((a.len(), e));
    }
    Ok(record("network_end_to_end", &errors, NETWORK_TOLERANCE))
}

/// Runs every per-layer check plus the end-to-end network check.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut net_missing = tiny_network_spec();
    net_missing.missing_data = true;
    let mut shared = tiny_network_spec();
    shared.share_branch_params = true;
    let mut stacked = tiny_network_spec();
    stacked.layout = InputLayout::Stacked;
    let mut out = vec![
        check_dense(seed)?,
        check_conv(seed)?,
        check_maxpool(seed)?,
        check_batchnorm(seed)?,
        check_relu(seed)?,
        check_dropout(seed)?,
        check_softmax_cross_entropy(seed)?,
        check_network(&tiny_network_spec(), seed)?,
    ];
    for (name, spec) in
        [("network_branch_dropout", net_missing), ("network_shared_branches", shared), ("network_stacked", stacked)]
    {
        let mut c = check_network(&spec, seed)?;
        c.name = name.to_string();
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_detects_a_wrong_gradient() {
        let x = [1.0, 2.0];
        let good = compare(&x, &[2.0, 4.0], STEP, |d| d[0] * d[0] + d[1] * d[1]);
        let bad = compare(&x, &[2.0, 3.0], STEP, |d| d[0] * d[0] + d[1] * d[1]);
        assert!(good < 1e-8);
        assert!(bad > 0.2);
    }

    #[test]
    fn dense_within_one_in_a_million() {
        let c = check_dense(5).unwrap();
        assert!(c.max_relative_error < 1e-6, "{c:?}");
    }

    #[test]
    fn conv_within_tolerance() {
        let c = check_conv(5).unwrap();
        assert!(c.passed(), "{c:?}");
    }
}
