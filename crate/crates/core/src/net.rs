//! The multi-temporal ConvNet: one convolutional branch per timestamp,
//! depth-wise concatenation, a convolutional trunk and a dense head.
//!
//! The same machinery builds the single-branch 2-D CNN baseline, whose input
//! is every timestamp's window stacked along the channel axis.
//!
//! Branch outputs pass through a gate before concatenation. A gate either
//! zeroes the whole branch block or scales it:
//!
//! * training with missing-data mode on: each branch is kept with probability
//!   `1/t` (resampled until at least one available branch survives) and kept
//!   blocks are scaled by `t`;
//! * everywhere else: unavailable timestamps are zeroed and the `k` available
//!   ones are scaled by `t / k`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward, dense_forward,
    dropout_backward, dropout_forward, maxpool_backward, maxpool_forward, output_extent, relu_backward, relu_forward,
    BatchNormCache, BatchNormConfig, BatchNormParams, ConvCache, DenseParams, DropoutMask, Mode, PoolCache,
};
use crate::tensor::{Scalar, Tensor};

/// One convolution + batch norm + ReLU + max-pool stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

impl ConvStage {
    pub const fn new(filters: usize, kernel: usize, pool_kernel: usize, pool_stride: usize) -> Self {
        ConvStage { filters, kernel, pool_kernel, pool_stride }
    }
}

/// How per-timestamp windows reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputLayout {
    /// One branch per timestamp.
    Branched,
    /// A single branch fed with all windows stacked along the channel axis.
    Stacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub timestamps: usize,
    pub channels_per_branch: usize,
    pub num_classes: usize,
    pub window_size: usize,
    pub branch: ConvStage,
    pub trunk: Vec<ConvStage>,
    /// Widths of the hidden fully-connected layers; a linear classifier follows.
    pub fc_sizes: Vec<usize>,
    pub fc_keep_prob: f64,
    /// Enables branch dropout with keep probability `1/t` during training.
    pub missing_data: bool,
    pub share_branch_params: bool,
    pub layout: InputLayout,
    pub batch_norm: BatchNormConfig,
}

impl NetworkSpec {
    /// The published architecture: 25x25 windows, 64-filter 4x4 branches with
    /// 2x2/2 pooling, trunk convolutions of 128 (4x4) and 256 (3x3) filters
    /// followed by 2x2 pools with strides 2 and 1, and two 1024-unit
    /// fully-connected layers.
    pub fn paper(timestamps: usize, channels_per_branch: usize, num_classes: usize) -> Self {
        NetworkSpec {
            timestamps,
            channels_per_branch,
            num_classes,
            window_size: 25,
            branch: ConvStage::new(64, 4, 2, 2),
            trunk: vec![ConvStage::new(128, 4, 2, 2), ConvStage::new(256, 3, 2, 1)],
            fc_sizes: vec![1024, 1024],
            fc_keep_prob: 0.5,
            missing_data: false,
            share_branch_params: false,
            layout: InputLayout::Branched,
            batch_norm: BatchNormConfig::default(),
        }
    }

    /// Single-branch baseline over the channel-wise concatenation of all
    /// timestamps, with the same trunk and head as [`NetworkSpec::paper`].
    pub fn two_d_cnn(timestamps: usize, channels_per_branch: usize, num_classes: usize) -> Self {
        NetworkSpec { layout: InputLayout::Stacked, ..Self::paper(timestamps, channels_per_branch, num_classes) }
    }

    pub fn with_missing_data(mut self, on: bool) -> Self {
        self.missing_data = on;
        self
    }

    /// Replaces layer widths while keeping kernels, strides and depth.
    pub fn with_widths(mut self, branch_filters: usize, trunk_filters: &[usize], fc_sizes: &[usize]) -> Self {
        self.branch.filters = branch_filters;
        for (stage, &f) in self.trunk.iter_mut().zip(trunk_filters) {
            stage.filters = f;
        }
        self.fc_sizes = fc_sizes.to_vec();
        self
    }

    /// Number of branch sub-networks.
    pub fn branch_count(&self) -> usize {
        match self.layout {
            InputLayout::Branched => self.timestamps,
            InputLayout::Stacked => 1,
        }
    }

    pub fn branch_input_channels(&self) -> usize {
        match self.layout {
            InputLayout::Branched => self.channels_per_branch,
            InputLayout::Stacked => self.timestamps * self.channels_per_branch,
        }
    }

    /// Keep probability of training-time branch dropout: `1/t` in
    /// missing-data mode, otherwise 1.
    pub fn branch_dropout_keep_prob(&self) -> f64 {
        if self.missing_data && self.layout == InputLayout::Branched {
            1.0 / self.timestamps as f64
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<ShapeChain> {
        if self.timestamps == 0 {
            return Err(Error::config("a network needs at least one timestamp"));
        }
        if self.channels_per_branch == 0 || self.num_classes == 0 {
            return Err(Error::config("channel and class counts must be positive"));
        }
        if self.missing_data && self.layout == InputLayout::Stacked {
            return Err(Error::config("missing-data mode needs a branched layout"));
        }
        layers::activation::check_keep_prob(self.fc_keep_prob)?;
        self.shape_chain()
    }

    /// Spatial extents through every stage; fails if any extent drops below 1.
    pub fn shape_chain(&self) -> Result<ShapeChain> {
        let stage_out = |size: usize, s: &ConvStage| -> Result<(usize, usize)> {
            let conv = output_extent(size, s.kernel, 1)?;
            let pool = output_extent(conv, s.pool_kernel, s.pool_stride)?;
            Ok((conv, pool))
        };
        let (bc, bp) = stage_out(self.window_size, &self.branch)?;
        let mut extents = vec![bc, bp];
        let mut size = bp;
        let mut channels = self.branch.filters * self.branch_count();
        let concat_channels = channels;
        for s in &self.trunk {
            let (c, p) = stage_out(size, s)?;
            extents.push(c);
            extents.push(p);
            size = p;
            channels = s.filters;
        }
        Ok(ShapeChain { extents, concat_channels, concat_extent: bp, features: channels * size * size })
    }
}

/// Derived activation sizes of a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeChain {
    /// Spatial extent after each convolution and each pool, in order.
    pub extents: Vec<usize>,
    pub concat_channels: usize,
    pub concat_extent: usize,
    /// Length of the flattened vector entering the dense head.
    pub features: usize,
}

/// Which timestamps have an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityMask {
    pub flags: Vec<bool>,
}

impl AvailabilityMask {
    pub fn all(t: usize) -> Self {
        AvailabilityMask { flags: vec![true; t] }
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        AvailabilityMask { flags }
    }

    /// Mask with only the listed timestamps available.
    pub fn only(t: usize, available: &[usize]) -> Self {
        let mut flags = vec![false; t];
        for &j in available {
            flags[j] = true;
        }
        AvailabilityMask { flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_available(&self, j: usize) -> bool {
        self.flags[j]
    }
}

/// Convolution weights plus the batch norm that follows it.
#[derive(Debug, Clone)]
pub struct ConvLayerParams<T> {
    /// `[K, C_in, kh, kw]`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BatchNormParams<T>,
}

impl<T: Scalar> ConvLayerParams<T> {
    fn init<R: Rng + ?Sized>(
        filters: usize,
        in_channels: usize,
        kernel: usize,
        bn: BatchNormConfig,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        ConvLayerParams {
            weights: he_normal(&[filters, in_channels, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[filters]),
            bn: BatchNormParams::new(filters, bn),
        }
    }
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Whether a parameter tensor takes part in weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BatchNorm,
}

#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct NetworkParams<T = f32> {
    pub spec: NetworkSpec,
    /// One entry per branch, or a single shared entry when
    /// `spec.share_branch_params` is set.
    pub branches: Vec<ConvLayerParams<T>>,
    pub trunk: Vec<ConvLayerParams<T>>,
    /// Hidden layers followed by the classifier.
    pub dense: Vec<DenseParams<T>>,
}

/// Builds and initializes the network described by `spec`.
pub fn build<T: Scalar, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<NetworkParams<T>> {
    let chain = spec.validate()?;
    let branch_params = if spec.share_branch_params { 1 } else { spec.branch_count() };
    let branches = (0..branch_params)
        .map(|_| {
            ConvLayerParams::init(
                spec.branch.filters,
                spec.branch_input_channels(),
                spec.branch.kernel,
                spec.batch_norm,
                rng,
            )
        })
        .collect();
    let mut in_ch = chain.concat_channels;
    let mut trunk = Vec::with_capacity(spec.trunk.len());
    for s in &spec.trunk {
        trunk.push(ConvLayerParams::init(s.filters, in_ch, s.kernel, spec.batch_norm, rng));
        in_ch = s.filters;
    }
    let mut dense = Vec::with_capacity(spec.fc_sizes.len() + 1);
    let mut width = chain.features;
    for &units in spec.fc_sizes.iter().chain(std::iter::once(&spec.num_classes)) {
        dense.push(DenseParams { weights: he_normal(&[units, width], width, rng), bias: Tensor::zeros(&[units]) });
        width = units;
    }
    Ok(NetworkParams { spec: spec.clone(), branches, trunk, dense })
}

/// Builds the 2-D CNN baseline: one branch over `t * ch` stacked channels.
pub fn build_2dcnn<T: Scalar, R: Rng + ?Sized>(
    timestamps: usize,
    channels: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<NetworkParams<T>> {
    build(&NetworkSpec::two_d_cnn(timestamps, channels, num_classes), rng)
}

/// Samples which of `t` branches survive training-time branch dropout.
///
/// Each branch is kept independently with `keep_prob`; draws are repeated
/// until at least one branch survives.
pub fn branch_dropout_mask<R: Rng + ?Sized>(t: usize, keep_prob: f64, rng: &mut R) -> Vec<bool> {
    branch_dropout_mask_within(&AvailabilityMask::all(t), keep_prob, rng)
}

/// Like [`branch_dropout_mask`] but only available branches can survive.
pub fn branch_dropout_mask_within<R: Rng + ?Sized>(
    available: &AvailabilityMask,
    keep_prob: f64,
    rng: &mut R,
) -> Vec<bool> {
    assert!(available.count() > 0, "no available branch to keep");
    if keep_prob >= 1.0 {
        return available.flags.clone();
    }
    loop {
        let mask: Vec<bool> = available
            .flags
            .iter()
            .map(|&avail| {
                let draw = rng.gen::<f64>() < keep_prob;
                draw && avail
            })
            .collect();
        if mask.iter().any(|&k| k) {
            return mask;
        }
    }
}

/// Per-timestamp multiplier applied to branch outputs; `None` zeroes the branch.
pub type Gates = Vec<Option<f64>>;

/// Per-sample gates: `None` when a timestamp is dropped for every sample of
/// the batch, else one multiplier per sample (0 drops that sample's branch).
pub type SampleGates = Vec<Option<Vec<f64>>>;

/// Gates used outside training-time branch dropout: available branches are
/// scaled by `t / k`, unavailable ones zeroed.
pub fn inference_gates(mask: &AvailabilityMask) -> Result<Gates> {
    let k = mask.count();
    if k == 0 {
        return Err(Error::input("no timestamp is available"));
    }
    let scale = mask.len() as f64 / k as f64;
    Ok(mask.flags.iter().map(|&a| a.then_some(scale)).collect())
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    conv: ConvCache<T>,
    bn: BatchNormCache<T>,
    bn_out: Tensor<T>,
    pool: PoolCache,
}

#[derive(Debug, Clone)]
struct DenseCache<T> {
    input: Tensor<T>,
    pre_activation: Option<Tensor<T>>,
    dropout: Option<DropoutMask<T>>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    gates: SampleGates,
    /// Post-gate concatenated branch activations.
    pub concat: Tensor<T>,
    branches: Vec<Option<StageCache<T>>>,
    trunk: Vec<StageCache<T>>,
    trunk_out_shape: Vec<usize>,
    dense: Vec<DenseCache<T>>,
    mode: Mode,
}

impl<T> ForwardCache<T> {
    pub fn gates(&self) -> &SampleGates {
        &self.gates
    }
}

/// Gradient of the loss for one [`ConvLayerParams`].
#[derive(Debug, Clone)]
pub struct ConvLayerGrads<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> ConvLayerGrads<T> {
    fn zeros_like(p: &ConvLayerParams<T>) -> Self {
        ConvLayerGrads {
            weights: Tensor::zeros(p.weights.shape()),
            bias: Tensor::zeros(p.bias.shape()),
            gamma: Tensor::zeros(p.bn.gamma.shape()),
            beta: Tensor::zeros(p.bn.beta.shape()),
        }
    }

    fn accumulate(&mut self, other: ConvLayerGrads<T>) -> Result<()> {
        self.weights.add_assign(&other.weights)?;
        self.bias.add_assign(&other.bias)?;
        self.gamma.add_assign(&other.gamma)?;
        self.beta.add_assign(&other.beta)
    }
}

/// Gradients laid out like [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct NetworkGrads<T> {
    pub branches: Vec<ConvLayerGrads<T>>,
    pub trunk: Vec<ConvLayerGrads<T>>,
    /// `(weights, bias)` per dense layer.
    pub dense: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> NetworkGrads<T> {
    /// Flattened in the same order as [`NetworkParams::params`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for g in self.branches.iter().chain(&self.trunk) {
            out.extend([&g.weights, &g.bias, &g.gamma, &g.beta]);
        }
        for (w, b) in &self.dense {
            out.extend([w, b]);
        }
        out
    }
}

fn stage_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvLayerParams<T>,
    stage: &ConvStage,
    mode: Mode,
) -> Result<(Tensor<T>, StageCache<T>)> {
    let (z, conv) = conv2d_forward(input, &params.weights, &params.bias, (1, 1))?;
    let (bn_out, bn) = batchnorm_forward(&z, &params.bn, mode)?;
    let a = relu_forward(&bn_out);
    let (out, pool) =
        maxpool_forward(&a, (stage.pool_kernel, stage.pool_kernel), (stage.pool_stride, stage.pool_stride))?;
    Ok((out, StageCache { conv, bn, bn_out, pool }))
}

fn stage_backward<T: Scalar>(
    cache: &StageCache<T>,
    params: &ConvLayerParams<T>,
    grad_output: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, ConvLayerGrads<T>)> {
    let g = maxpool_backward(&cache.pool, grad_output)?;
    let g = relu_backward(&cache.bn_out, &g)?;
    let bn = batchnorm_backward(&cache.bn, &params.bn, &g)?;
    let conv = conv2d_backward(&cache.conv, &params.weights, &bn.input, need_input_grad)?;
    Ok((conv.input, ConvLayerGrads { weights: conv.weights, bias: conv.bias, gamma: bn.gamma, beta: bn.beta }))
}

impl<T: Scalar> NetworkParams<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn branch_params(&self, j: usize) -> &ConvLayerParams<T> {
        if self.spec.share_branch_params {
            &self.branches[0]
        } else {
            &self.branches[j]
        }
    }

    /// Learnable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for p in self.branches.iter().chain(&self.trunk) {
            out.extend([&p.weights, &p.bias, &p.bn.gamma, &p.bn.beta]);
        }
        for d in &self.dense {
            out.extend([&d.weights, &d.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for p in self.branches.iter_mut().chain(self.trunk.iter_mut()) {
            out.push(&mut p.weights);
            out.push(&mut p.bias);
            out.push(&mut p.bn.gamma);
            out.push(&mut p.bn.beta);
        }
        for d in &mut self.dense {
            out.push(&mut d.weights);
            out.push(&mut d.bias);
        }
        out
    }

    /// Names and kinds aligned with [`NetworkParams::params`].
    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let conv_layers = self
            .branches
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("branch{i}"), p))
            .chain(self.trunk.iter().enumerate().map(|(i, p)| (format!("trunk{i}"), p)));
        for (prefix, p) in conv_layers {
            out.push(ParamInfo {
                name: format!("{prefix}.weights"),
                kind: ParamKind::Weight,
                shape: p.weights.shape().to_vec(),
            });
            out.push(ParamInfo {
                name: format!("{prefix}.bias"),
                kind: ParamKind::Bias,
                shape: p.bias.shape().to_vec(),
            });
            out.push(ParamInfo {
                name: format!("{prefix}.bn.gamma"),
                kind: ParamKind::BatchNorm,
                shape: p.bn.gamma.shape().to_vec(),
            });
            out.push(ParamInfo {
                name: format!("{prefix}.bn.beta"),
                kind: ParamKind::BatchNorm,
                shape: p.bn.beta.shape().to_vec(),
            });
        }
        for (i, d) in self.dense.iter().enumerate() {
            out.push(ParamInfo {
                name: format!("dense{i}.weights"),
                kind: ParamKind::Weight,
                shape: d.weights.shape().to_vec(),
            });
            out.push(ParamInfo {
                name: format!("dense{i}.bias"),
                kind: ParamKind::Bias,
                shape: d.bias.shape().to_vec(),
            });
        }
        out
    }

    /// Batch-norm running statistics as `(name, tensor)` pairs.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, p) in self.conv_layers_named() {
            out.push((format!("{prefix}.bn.running_mean"), &p.bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &p.bn.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let layers = self
            .branches
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (format!("branch{i}"), p))
            .chain(self.trunk.iter_mut().enumerate().map(|(i, p)| (format!("trunk{i}"), p)));
        for (prefix, p) in layers {
            out.push((format!("{prefix}.bn.running_mean"), &mut p.bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &mut p.bn.running_var));
        }
        out
    }

    fn conv_layers_named(&self) -> Vec<(String, &ConvLayerParams<T>)> {
        self.branches
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("branch{i}"), p))
            .chain(self.trunk.iter().enumerate().map(|(i, p)| (format!("trunk{i}"), p)))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Number of learnable values in the branch stage alone.
    pub fn branch_parameter_count(&self) -> usize {
        self.branches.iter().map(|p| p.weights.len() + p.bias.len() + p.bn.gamma.len() + p.bn.beta.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let conv = |p: &ConvLayerParams<T>| ConvLayerParams {
            weights: p.weights.cast(),
            bias: p.bias.cast(),
            bn: BatchNormParams {
                gamma: p.bn.gamma.cast(),
                beta: p.bn.beta.cast(),
                running_mean: p.bn.running_mean.cast(),
                running_var: p.bn.running_var.cast(),
                config: p.bn.config,
                initialized: p.bn.initialized,
            },
        };
        NetworkParams {
            spec: self.spec.clone(),
            branches: self.branches.iter().map(conv).collect(),
            trunk: self.trunk.iter().map(conv).collect(),
            dense: self.dense.iter().map(|d| DenseParams { weights: d.weights.cast(), bias: d.bias.cast() }).collect(),
        }
    }

    /// Checks window shapes against the spec and returns the batch size.
    fn check_windows(&self, windows: &[Option<&Tensor<T>>], mask: &AvailabilityMask) -> Result<usize> {
        let t = self.spec.timestamps;
        if windows.len() != t || mask.len() != t {
            return Err(Error::input(format!(
                "expected {t} timestamps, got {} windows and a mask of {}",
                windows.len(),
                mask.len()
            )));
        }
        if mask.count() == 0 {
            return Err(Error::input("availability mask has no available timestamp"));
        }
        let ws = self.spec.window_size;
        let mut batch = None;
        for (j, w) in windows.iter().enumerate() {
            if !mask.is_available(j) {
                continue;
            }
            let w = w.ok_or_else(|| Error::input(format!("timestamp {j} is available but has no window")))?;
            let (n, c, h, wd) = w.dims4()?;
            if (c, h, wd) != (self.spec.channels_per_branch, ws, ws) {
                return Err(Error::input(format!(
                    "timestamp {j}: window {:?} does not match [N, {}, {ws}, {ws}]",
                    w.shape(),
                    self.spec.channels_per_branch
                )));
            }
            match batch {
                None => batch = Some(n),
                Some(b) if b != n => {
                    return Err(Error::input(format!("batch size mismatch: {b} vs {n} at timestamp {j}")))
                }
                _ => {}
            }
        }
        batch.ok_or_else(|| Error::input("no window supplied"))
    }

    /// Full forward pass.
    ///
    /// `windows[j]` holds `[N, ch, ws, ws]` context windows for timestamp `j`;
    /// entries for unavailable timestamps are ignored and may be `None`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        windows: &[Option<&Tensor<T>>],
        mask: &AvailabilityMask,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let n = self.check_windows(windows, mask)?;
        let gates = match (mode, self.spec.layout) {
            (Mode::Train, InputLayout::Branched) if self.spec.missing_data => {
                // one independent branch mask per sample, as ordinary dropout
                let keep = self.spec.branch_dropout_keep_prob();
                let mut gates: SampleGates = vec![None; self.spec.timestamps];
                for b in 0..n {
                    for (j, kept) in branch_dropout_mask_within(mask, keep, rng).into_iter().enumerate() {
                        if kept {
                            gates[j].get_or_insert_with(|| vec![0.0; n])[b] = 1.0 / keep;
                        }
                    }
                }
                return self.forward_sample_gated(windows, &gates, mode, rng);
            }
            (_, InputLayout::Branched) => inference_gates(mask)?,
            (_, InputLayout::Stacked) => mask.flags.iter().map(|&a| a.then_some(1.0)).collect(),
        };
        self.forward_gated(windows, &gates, mode, rng)
    }

    /// Eval-mode forward that drops unavailable timestamps and rescales the
    /// `k` available branches by `t / k`.
    pub fn inference_branch_drop(&self, windows: &[Option<&Tensor<T>>], mask: &AvailabilityMask) -> Result<Tensor<T>> {
        self.check_windows(windows, mask)?;
        let gates = match self.spec.layout {
            InputLayout::Branched => inference_gates(mask)?,
            InputLayout::Stacked => mask.flags.iter().map(|&a| a.then_some(1.0)).collect(),
        };
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(self.forward_gated(windows, &gates, Mode::Eval, &mut no_rng)?.0)
    }

    /// Forward pass with explicit per-timestamp gates shared by every sample.
    pub fn forward_gated<R: Rng + ?Sized>(
        &self,
        windows: &[Option<&Tensor<T>>],
        gates: &[Option<f64>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let n = windows
            .iter()
            .zip(gates)
            .find_map(|(w, g)| g.and(*w).map(|w| w.shape()[0]))
            .ok_or_else(|| Error::input("no window for any kept timestamp"))?;
        let per_sample: SampleGates = gates.iter().map(|g| g.map(|s| vec![s; n])).collect();
        self.forward_sample_gated(windows, &per_sample, mode, rng)
    }

    /// Forward pass with one gate per timestamp and sample.
    pub fn forward_sample_gated<R: Rng + ?Sized>(
        &self,
        windows: &[Option<&Tensor<T>>],
        gates: &[Option<Vec<f64>>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let spec = &self.spec;
        if gates.len() != spec.timestamps || gates.iter().all(|g| g.is_none()) {
            return Err(Error::input("gates must have one entry per timestamp and keep at least one"));
        }
        let ws = spec.window_size;
        let n = windows
            .iter()
            .zip(gates)
            .find_map(|(w, g)| g.as_ref().and(*w).map(|w| w.shape()[0]))
            .ok_or_else(|| Error::input("no window for any kept timestamp"))?;
        if gates.iter().flatten().any(|g| g.len() != n) {
            return Err(Error::input(format!("gates must hold one multiplier per sample ({n})")));
        }

        let chain = spec.shape_chain()?;
        let (bf, be) = (spec.branch.filters, chain.concat_extent);
        let block = bf * be * be;
        let mut concat = Tensor::zeros(&[n, chain.concat_channels, be, be]);
        let mut branch_caches = Vec::with_capacity(spec.branch_count());

        match spec.layout {
            InputLayout::Branched => {
                for (j, gate) in gates.iter().enumerate() {
                    let Some(scales) = gate else {
                        branch_caches.push(None);
                        continue;
                    };
                    let x = windows[j].ok_or_else(|| Error::input(format!("timestamp {j} kept without a window")))?;
                    if x.shape() != [n, spec.channels_per_branch, ws, ws] {
                        return Err(Error::input(format!("timestamp {j}: unexpected window shape {:?}", x.shape())));
                    }
                    let (out, cache) = stage_forward(x, self.branch_params(j), &spec.branch, mode)?;
                    for (b, &scale) in scales.iter().enumerate() {
                        let s = T::from_f64(scale);
                        let dst = &mut concat.sample_mut(b)[j * block..(j + 1) * block];
                        for (d, &v) in dst.iter_mut().zip(out.sample(b)) {
                            *d = v * s;
                        }
                    }
                    branch_caches.push(Some(cache));
                }
            }
            InputLayout::Stacked => {
                let zeros = Tensor::zeros(&[n, spec.channels_per_branch, ws, ws]);
                let parts: Vec<&Tensor<T>> = windows
                    .iter()
                    .zip(gates)
                    .map(|(w, g)| match (g.as_ref(), w) {
                        (Some(_), Some(w)) => *w,
                        _ => &zeros,
                    })
                    .collect();
                let x = Tensor::concat_channels(&parts)?;
                let (out, cache) = stage_forward(&x, &self.branches[0], &spec.branch, mode)?;
                concat = out;
                branch_caches.push(Some(cache));
            }
        }

        let mut h = concat.clone();
        let mut trunk_caches = Vec::with_capacity(spec.trunk.len());
        for (stage, params) in spec.trunk.iter().zip(&self.trunk) {
            let (out, cache) = stage_forward(&h, params, stage, mode)?;
            trunk_caches.push(cache);
            h = out;
        }
        let trunk_out_shape = h.shape().to_vec();
        let mut x = h.reshape(&[n, chain.features])?;

        let mut dense_caches = Vec::with_capacity(self.dense.len());
        let last = self.dense.len() - 1;
        for (i, d) in self.dense.iter().enumerate() {
            let z = dense_forward(&x, d)?;
            if i == last {
                dense_caches.push(DenseCache { input: x, pre_activation: None, dropout: None });
                x = z;
            } else {
                let a = relu_forward(&z);
                let (dropped, mask) = dropout_forward(&a, spec.fc_keep_prob, rng, mode)?;
                dense_caches.push(DenseCache { input: x, pre_activation: Some(z), dropout: Some(mask) });
                x = dropped;
            }
        }
        x.check_finite("logits")?;
        let cache = ForwardCache {
            gates: gates.to_vec(),
            concat,
            branches: branch_caches,
            trunk: trunk_caches,
            trunk_out_shape,
            dense: dense_caches,
            mode,
        };
        Ok((x, cache))
    }

    /// Gradients of the loss given `grad_logits [N, classes]`.
    ///
    /// Branches that were gated out receive exactly zero gradient.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<NetworkGrads<T>> {
        let spec = &self.spec;
        if cache.dense.len() != self.dense.len() || cache.trunk.len() != self.trunk.len() {
            return Err(Error::State("forward cache does not belong to this network".into()));
        }
        let mut dense_grads = Vec::with_capacity(self.dense.len());
        let mut g = grad_logits.clone();
        for (d, c) in self.dense.iter().zip(&cache.dense).rev() {
            if let (Some(z), Some(mask)) = (&c.pre_activation, &c.dropout) {
                g = dropout_backward(mask, &g)?;
                g = relu_backward(z, &g)?;
            }
            let dg = dense_backward(&c.input, d, &g)?;
            dense_grads.push((dg.weights, dg.bias));
            g = dg.input;
        }
        dense_grads.reverse();

        let mut g = g.reshape(&cache.trunk_out_shape)?;
        let mut trunk_grads = Vec::with_capacity(self.trunk.len());
        for (params, c) in self.trunk.iter().zip(&cache.trunk).rev() {
            let (gi, grads) = stage_backward(c, params, &g, true)?;
            trunk_grads.push(grads);
            g = gi.expect("input gradient requested");
        }
        trunk_grads.reverse();
        let grad_concat = g;

        let mut branch_grads: Vec<ConvLayerGrads<T>> = self.branches.iter().map(ConvLayerGrads::zeros_like).collect();
        match spec.layout {
            InputLayout::Branched => {
                let n = grad_concat.shape()[0];
                let chain = spec.shape_chain()?;
                let be = chain.concat_extent;
                let block = spec.branch.filters * be * be;
                for (j, (gate, c)) in cache.gates.iter().zip(&cache.branches).enumerate() {
                    let (Some(scales), Some(c)) = (gate, c) else { continue };
                    let mut gb = Tensor::zeros(&[n, spec.branch.filters, be, be]);
                    for (b, &scale) in scales.iter().enumerate() {
                        let s = T::from_f64(scale);
                        let src = &grad_concat.sample(b)[j * block..(j + 1) * block];
                        for (d, &v) in gb.sample_mut(b).iter_mut().zip(src) {
                            *d = v * s;
                        }
                    }
                    let (_, grads) = stage_backward(c, self.branch_params(j), &gb, false)?;
                    let slot = if spec.share_branch_params { 0 } else { j };
                    branch_grads[slot].accumulate(grads)?;
                }
            }
            InputLayout::Stacked => {
                let c = cache.branches[0].as_ref().ok_or_else(|| Error::State("missing branch cache".into()))?;
                let (_, grads) = stage_backward(c, &self.branches[0], &grad_concat, false)?;
                branch_grads[0] = grads;
            }
        }
        Ok(NetworkGrads { branches: branch_grads, trunk: trunk_grads, dense: dense_grads })
    }

    /// Folds train-mode batch statistics from `cache` into the running estimates.
    pub fn apply_running_stats(&mut self, cache: &ForwardCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let shared = self.spec.share_branch_params;
        for (j, c) in cache.branches.iter().enumerate() {
            if let Some(c) = c {
                let slot = if shared { 0 } else { j };
                self.branches[slot].bn.update_running(&c.bn);
            }
        }
        for (p, c) in self.trunk.iter_mut().zip(&cache.trunk) {
            p.bn.update_running(&c.bn);
        }
    }

    /// Runs the trunk and dense head in eval mode on a concatenated branch tensor.
    pub fn forward_from_concat(&self, concat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = concat.clone();
        for (stage, params) in self.spec.trunk.iter().zip(&self.trunk) {
            h = stage_forward(&h, params, stage, Mode::Eval)?.0;
        }
        let n = h.shape()[0];
        let features = h.len() / n;
        let mut x = h.reshape(&[n, features])?;
        let last = self.dense.len() - 1;
        for (i, d) in self.dense.iter().enumerate() {
            let z = dense_forward(&x, d)?;
            x = if i == last { z } else { relu_forward(&z) };
        }
        Ok(x)
    }

    /// Eval-mode output of branch `j` before gating, `[N, F, e, e]`.
    pub fn branch_output(&self, j: usize, window: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(stage_forward(window, self.branch_params(j), &self.spec.branch, Mode::Eval)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn tiny_spec(t: usize) -> NetworkSpec {
        NetworkSpec::paper(t, 2, 3).with_widths(4, &[6, 8], &[10])
    }

    fn random_windows(t: usize, n: usize, spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let ws = spec.window_size;
        (0..t)
            .map(|_| {
                let len = n * spec.channels_per_branch * ws * ws;
                Tensor::from_vec(&[n, spec.channels_per_branch, ws, ws], (0..len).map(|_| rng.gen::<f64>()).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn paper_shape_chain_closes_at_one() {
        let chain = NetworkSpec::paper(15, 3, 4).shape_chain().unwrap();
        assert_eq!(chain.extents, vec![22, 11, 8, 4, 2, 1]);
        assert_eq!(chain.concat_channels, 960);
        assert_eq!(chain.features, 256);
    }

    #[test]
    fn shape_chain_rejects_small_windows() {
        let mut spec = NetworkSpec::paper(2, 3, 2);
        spec.window_size = 12;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_timestamp_is_valid() {
        let p: NetworkParams<f32> = build(&NetworkSpec::paper(1, 3, 2), &mut rng()).unwrap();
        assert_eq!(p.branches.len(), 1);
        assert_eq!(p.spec.branch_dropout_keep_prob(), 1.0);
    }

    #[test]
    fn many_deep_branches() {
        let spec = NetworkSpec::paper(36, 39, 2).with_widths(2, &[2, 2], &[4]);
        let p: NetworkParams<f32> = build(&spec, &mut rng()).unwrap();
        assert_eq!(p.branches.len(), 36);
        assert!(p.branches.iter().all(|b| b.weights.shape() == [2, 39, 4, 4]));
    }

    #[test]
    fn two_d_cnn_stacks_channels() {
        let p: NetworkParams<f32> = build_2dcnn(15, 3, 4, &mut rng()).unwrap();
        assert_eq!(p.branches.len(), 1);
        assert_eq!(p.branches[0].weights.shape(), &[64, 45, 4, 4]);
        let mt: NetworkParams<f32> = build(&NetworkSpec::paper(15, 3, 4), &mut rng()).unwrap();
        assert!(p.branch_parameter_count() < mt.branch_parameter_count());
        // one 64x45x4x4 conv against fifteen 64x3x4x4 convs
        assert_eq!(p.branches[0].weights.len(), 46_080);
        assert_eq!(mt.branches.iter().map(|b| b.weights.len()).sum::<usize>(), 15 * 3_072);

        let one: NetworkParams<f32> = build_2dcnn(1, 3, 4, &mut rng()).unwrap();
        let mt1: NetworkParams<f32> = build(&NetworkSpec::paper(1, 3, 4), &mut rng()).unwrap();
        let shapes = |p: &NetworkParams<f32>| p.param_info().into_iter().map(|i| i.shape).collect::<Vec<_>>();
        assert_eq!(shapes(&one), shapes(&mt1));
    }

    #[test]
    fn keep_prob_is_inverse_of_t() {
        let spec = NetworkSpec::paper(12, 3, 4).with_missing_data(true);
        assert_eq!(spec.branch_dropout_keep_prob(), 1.0 / 12.0);
        let mut r = rng();
        for _ in 0..20 {
            assert_eq!(branch_dropout_mask(1, 1.0, &mut r), vec![true]);
            assert!(branch_dropout_mask(12, 1.0 / 12.0, &mut r).iter().any(|&k| k));
        }
    }

    #[test]
    fn branch_mask_respects_availability() {
        let mask = AvailabilityMask::only(5, &[1, 3]);
        let mut r = rng();
        for _ in 0..200 {
            let m = branch_dropout_mask_within(&mask, 0.2, &mut r);
            assert!(!m[0] && !m[2] && !m[4]);
            assert!(m[1] || m[3]);
        }
    }

    #[test]
    fn all_false_mask_is_input_error() {
        let spec = tiny_spec(2);
        let p: NetworkParams<f64> = build(&spec, &mut rng()).unwrap();
        let w = random_windows(2, 1, &spec, &mut rng());
        let refs: Vec<Option<&Tensor<f64>>> = w.iter().map(Some).collect();
        let err = p.forward(&refs, &AvailabilityMask::from_flags(vec![false, false]), Mode::Eval, &mut rng());
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn batch_mismatch_is_input_error() {
        let spec = tiny_spec(2);
        let p: NetworkParams<f64> = build(&spec, &mut rng()).unwrap();
        let mut r = rng();
        let a = random_windows(1, 2, &spec, &mut r).remove(0);
        let b = random_windows(1, 3, &spec, &mut r).remove(0);
        let err = p.forward(&[Some(&a), Some(&b)], &AvailabilityMask::all(2), Mode::Eval, &mut r);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn symmetric_branches_give_equal_blocks() {
        let spec = tiny_spec(2);
        let mut p: NetworkParams<f64> = build(&spec, &mut rng()).unwrap();
        p.branches[1] = p.branches[0].clone();
        let w = random_windows(1, 3, &spec, &mut rng()).remove(0);
        let (_, cache) = p.forward(&[Some(&w), Some(&w)], &AvailabilityMask::all(2), Mode::Eval, &mut rng()).unwrap();
        let half = cache.concat.len() / 3 / 2;
        for b in 0..3 {
            let s = cache.concat.sample(b);
            assert_eq!(&s[..half], &s[half..]);
        }
    }

    #[test]
    fn zero_window_gives_finite_probabilities() {
        let spec = tiny_spec(3);
        let p: NetworkParams<f32> = build(&spec, &mut rng()).unwrap();
        let z = Tensor::zeros(&[1, 2, 25, 25]);
        let logits = p.inference_branch_drop(&[Some(&z), Some(&z), Some(&z)], &AvailabilityMask::all(3)).unwrap();
        let (_, probs) = layers::softmax_cross_entropy(logits.data(), 0).unwrap();
        assert!(logits.is_finite());
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_mask_scale_is_one() {
        assert_eq!(inference_gates(&AvailabilityMask::all(4)).unwrap(), vec![Some(1.0); 4]);
        let g = inference_gates(&AvailabilityMask::only(12, &[0, 5, 9])).unwrap();
        assert_eq!(g.iter().flatten().copied().collect::<Vec<_>>(), vec![4.0; 3]);
        assert!(inference_gates(&AvailabilityMask::from_flags(vec![false; 3])).is_err());
    }

    #[test]
    fn dropped_branch_is_zeroed_after_the_branch_not_before() {
        // A zero window still produces beta-driven activations; dropping must
        // remove them entirely.
        let spec = tiny_spec(2);
        let mut p: NetworkParams<f64> = build(&spec, &mut rng()).unwrap();
        for b in &mut p.branches {
            b.bias.fill(0.0);
            b.bn.beta.fill(0.7);
        }
        let w = random_windows(1, 1, &spec, &mut rng()).remove(0);
        let zero = Tensor::zeros(w.shape());
        let dropped = p.forward_gated(&[Some(&w), None], &[Some(1.0), None], Mode::Eval, &mut rng()).unwrap().1;
        let zero_fed =
            p.forward_gated(&[Some(&w), Some(&zero)], &[Some(1.0), Some(1.0)], Mode::Eval, &mut rng()).unwrap().1;
        let half = dropped.concat.len() / 2;
        assert!(dropped.concat.data()[half..].iter().all(|&v| v == 0.0));
        assert!(zero_fed.concat.data()[half..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn eval_forward_consumes_no_randomness() {
        let spec = tiny_spec(2);
        let p: NetworkParams<f32> = build(&spec, &mut rng()).unwrap();
        let w = random_windows(2, 2, &spec, &mut rng());
        let w32: Vec<Tensor<f32>> = w.iter().map(|t| t.cast()).collect();
        let refs: Vec<Option<&Tensor<f32>>> = w32.iter().map(Some).collect();
        let mut a = rng();
        let b = a.clone();
        let (la, _) = p.forward(&refs, &AvailabilityMask::all(2), Mode::Eval, &mut a).unwrap();
        assert_eq!(a.get_word_pos(), b.get_word_pos());
        let (lb, _) = p.forward(&refs, &AvailabilityMask::all(2), Mode::Eval, &mut a).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn dropped_branch_gets_zero_gradient() {
        let spec = tiny_spec(3).with_missing_data(true);
        let p: NetworkParams<f64> = build(&spec, &mut rng()).unwrap();
        let w = random_windows(3, 4, &spec, &mut rng());
        let refs: Vec<Option<&Tensor<f64>>> = w.iter().map(Some).collect();
        let mut r = rng();
        for _ in 0..10 {
            let (logits, cache) = p.forward(&refs, &AvailabilityMask::all(3), Mode::Train, &mut r).unwrap();
            let loss = layers::softmax_cross_entropy_batch(&logits, &[0, 1, 2, 0]).unwrap();
            let grads = p.backward(&cache, &loss.grad).unwrap();
            for (j, gate) in cache.gates().iter().enumerate() {
                let g = &grads.branches[j];
                let zero = g.weights.max_abs() == 0.0 && g.bias.max_abs() == 0.0 && g.gamma.max_abs() == 0.0;
                assert_eq!(gate.is_none(), zero, "branch {j} gate {gate:?}");
                if let Some(s) = gate {
                    assert!(s.iter().all(|&v| v == 0.0 || v == 3.0) && s.contains(&3.0), "{s:?}");
                }
            }
            for b in 0..4 {
                assert!(cache.gates().iter().flatten().any(|s| s[b] > 0.0), "sample {b} kept no branch");
            }
        }
    }

    #[test]
    fn branch_masks_are_drawn_per_sample() {
        let spec = tiny_spec(4).with_missing_data(true);
        let p: NetworkParams<f64> = build(&spec, &mut rng()).unwrap();
        let w = random_windows(4, 16, &spec, &mut rng());
        let refs: Vec<Option<&Tensor<f64>>> = w.iter().map(Some).collect();
        let (_, cache) = p.forward(&refs, &AvailabilityMask::all(4), Mode::Train, &mut rng()).unwrap();
        let pattern =
            |b: usize| -> Vec<bool> { cache.gates().iter().map(|g| g.as_ref().is_some_and(|s| s[b] > 0.0)).collect() };
        assert!((1..16).any(|b| pattern(b) != pattern(0)));
    }

    #[test]
    fn param_listing_is_consistent() {
        let p: NetworkParams<f32> = build(&tiny_spec(2), &mut rng()).unwrap();
        let info = p.param_info();
        let params = p.params();
        assert_eq!(info.len(), params.len());
        for (i, t) in info.iter().zip(&params) {
            assert_eq!(i.shape, t.shape());
        }
        assert_eq!(p.buffers().len(), 2 * (2 + 2));
    }
}
