//! Mini-batch SGD with momentum, weight decay and a staircase learning-rate
//! schedule.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{extract_timestamps, Sample, TemporalImageStack};
use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy_batch, Mode};
use crate::net::{build, AvailabilityMask, NetworkParams, NetworkSpec, ParamKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub max_iterations: u64,
    /// The learning rate is multiplied by `decay_rate` every `decay_interval` iterations.
    pub decay_interval: u64,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train with branch dropout so the model tolerates missing timestamps.
    pub missing_data_mode: bool,
    /// Draw a class uniformly before drawing a pixel of that class.
    pub class_balanced: bool,
    /// A trace row is recorded every this many iterations.
    pub trace_interval: u64,
    /// Periodic checkpoint interval; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.01,
            weight_decay: 0.0005,
            momentum: 0.9,
            max_iterations: 200_000,
            decay_interval: 50_000,
            decay_rate: 0.5,
            batch_size: 64,
            seed: 0,
            missing_data_mode: false,
            class_balanced: false,
            trace_interval: 100,
            checkpoint_interval: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("decay_rate", self.decay_rate),
        ];
        for (name, v) in positive {
            // zero is allowed for regularizers, negative never
            if !(v.is_finite() && v >= 0.0) || (name == "learning_rate" && v == 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config(format!("momentum must be below 1, got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.decay_interval == 0 || self.trace_interval == 0 {
            return Err(Error::config("batch_size, decay_interval and trace_interval must be at least 1"));
        }
        Ok(())
    }
}

/// Staircase decay: `lr * decay_rate^floor(iter / decay_interval)`.
pub fn lr_schedule(iter: u64, config: &TrainingConfig) -> f64 {
    let steps = (iter / config.decay_interval) as i32;
    config.learning_rate * config.decay_rate.powi(steps)
}

/// One momentum step on every parameter:
/// `v = m*v - lr*(g + wd*w)`, `w = w + v`, with weight decay only on
/// [`ParamKind::Weight`] tensors.
///
/// Nothing is modified when any gradient or updated value is non-finite.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    kinds: &[ParamKind],
    velocities: &mut [Tensor<T>],
    lr: f64,
    config: &TrainingConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || kinds.len() != n || velocities.len() != n {
        return Err(Error::input("parameters, gradients, kinds and velocities must align"));
    }
    let (m, lr) = (T::from_f64(config.momentum), T::from_f64(lr));
    let mut updates = Vec::with_capacity(n);
    for i in 0..n {
        let (w, g, v) = (&params[i], grads[i], &velocities[i]);
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::shape(format!("parameter {i}: {:?} vs gradient {:?}", w.shape(), g.shape())));
        }
        g.check_finite(&format!("gradient of parameter {i}"))?;
        let wd = T::from_f64(if kinds[i] == ParamKind::Weight { config.weight_decay } else { 0.0 });
        let mut new_v = Vec::with_capacity(w.len());
        let mut new_w = Vec::with_capacity(w.len());
        for ((&wi, &gi), &vi) in w.data().iter().zip(g.data()).zip(v.data()) {
            let vn = m * vi - lr * (gi + wd * wi);
            let wn = wi + vn;
            if !wn.is_finite() || !vn.is_finite() {
                return Err(Error::Numeric(format!("non-finite update in parameter {i}")));
            }
            new_v.push(vn);
            new_w.push(wn);
        }
        updates.push((new_w, new_v));
    }
    for ((w, v), (nw, nv)) in params.iter_mut().zip(velocities.iter_mut()).zip(updates) {
        w.data_mut().copy_from_slice(&nw);
        v.data_mut().copy_from_slice(&nv);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub batch_accuracy: f64,
}

pub const TRACE_HEADER: &str = "iteration,lr,loss,batch_accuracy";

/// Writes the trace as CSV with a header row.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.iteration, r.lr, r.loss, r.batch_accuracy));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Labeled pixels of one image stack.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub stack: &'a TemporalImageStack,
    pub samples: &'a [Sample],
}

/// Where and how often checkpoints go.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    /// Directory for `checkpoint_<iter>.mtcn` and `final.mtcn`; `None` keeps
    /// checkpoints in memory only.
    pub dir: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

/// Trains from scratch.
pub fn train(
    spec: &NetworkSpec,
    data: TrainingSet,
    config: &TrainingConfig,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = spec.clone().with_missing_data(config.missing_data_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params: NetworkParams<f32> = build(&spec, &mut rng)?;
    let start = Checkpoint::new(params, config.clone(), &rng);
    resume(start, data, config, sink)
}

fn draw_batch<R: Rng>(
    samples: &[Sample],
    by_class: &[Vec<usize>],
    size: usize,
    balanced: bool,
    rng: &mut R,
) -> Vec<Sample> {
    (0..size)
        .map(|_| {
            if balanced {
                let present: Vec<&Vec<usize>> = by_class.iter().filter(|c| !c.is_empty()).collect();
                let class = present.choose(rng).expect("at least one class present");
                samples[*class.choose(rng).expect("nonempty class")]
            } else {
                samples[rng.gen_range(0..samples.len())]
            }
        })
        .collect()
}

/// Continues training from `checkpoint` up to `config.max_iterations`.
///
/// Starting from the checkpoint a run wrote at iteration `i` gives the same
/// parameters as the uninterrupted run.
pub fn resume(
    mut checkpoint: Checkpoint,
    data: TrainingSet,
    config: &TrainingConfig,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    config.validate()?;
    if checkpoint.config_hash != Checkpoint::hash_config(&checkpoint.params.spec, config) {
        return Err(Error::config("checkpoint was written with a different network or training configuration"));
    }
    let spec = checkpoint.params.spec.clone();
    if data.samples.is_empty() {
        return Err(Error::input("no labeled training pixel"));
    }
    if data.stack.len() != spec.timestamps || data.stack.channels != spec.channels_per_branch {
        return Err(Error::input(format!(
            "network expects {} timestamps of {} channels, stack has {} of {}",
            spec.timestamps,
            spec.channels_per_branch,
            data.stack.len(),
            data.stack.channels
        )));
    }
    let mut by_class = vec![Vec::new(); spec.num_classes];
    for (i, s) in data.samples.iter().enumerate() {
        by_class
            .get_mut(s.label)
            .ok_or_else(|| Error::input(format!("label {} outside {} classes", s.label, spec.num_classes)))?
            .push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            log::warn!("class {c} has no training pixel");
        }
    }

    let mask: AvailabilityMask = data.stack.mask();
    let mut rng = checkpoint.rng.restore();
    let kinds: Vec<ParamKind> = checkpoint.params.param_info().into_iter().map(|p| p.kind).collect();
    let mut trace = Vec::new();

    while checkpoint.iteration < config.max_iterations {
        let iter = checkpoint.iteration;
        let lr = lr_schedule(iter, config);
        let batch = draw_batch(data.samples, &by_class, config.batch_size, config.class_balanced, &mut rng);
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let windows = extract_timestamps(data.stack, &batch, &mask, spec.window_size)?;
        let refs: Vec<Option<&Tensor<f32>>> = windows.iter().map(Option::as_ref).collect();

        let params = &mut checkpoint.params;
        let (logits, cache) = params.forward(&refs, &mask, Mode::Train, &mut rng)?;
        let loss = softmax_cross_entropy_batch(&logits, &labels)?;
        if !loss.loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {} at iteration {iter}", loss.loss)));
        }
        let grads = params.backward(&cache, &loss.grad)?;
        {
            let grad_refs = grads.tensors();
            let mut param_refs = params.params_mut();
            sgd_step(&mut param_refs, &grad_refs, &kinds, &mut checkpoint.velocities, lr, config).map_err(
                |e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("{msg} at iteration {iter} (loss {})", loss.loss)),
                    other => other,
                },
            )?;
        }
        params.apply_running_stats(&cache);

        if iter % config.trace_interval == 0 {
            let row = TraceRow {
                iteration: iter,
                lr,
                loss: loss.loss as f64,
                batch_accuracy: loss.correct as f64 / batch.len() as f64,
            };
            log::info!("iter {} lr {} loss {:.5} acc {:.3}", row.iteration, row.lr, row.loss, row.batch_accuracy);
            trace.push(row);
        }
        checkpoint.iteration += 1;
        checkpoint.rng = RngState::capture(&rng);
        if config.checkpoint_interval > 0 && checkpoint.iteration % config.checkpoint_interval == 0 {
            if let Some(dir) = &sink.dir {
                checkpoint.save(&dir.join(format!("checkpoint_{:08}.mtcn", checkpoint.iteration)))?;
            }
        }
    }
    checkpoint.rng = RngState::capture(&rng);
    if let Some(dir) = &sink.dir {
        checkpoint.save(&dir.join("final.mtcn"))?;
    }
    Ok(TrainOutcome { checkpoint, trace })
}
