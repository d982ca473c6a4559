//! Valid-padding 2-D convolution lowered to GEMM through im2col.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Output extent of a valid window sweep: `floor((input - kernel) / stride) + 1`.
pub fn output_extent(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::config(format!("kernel {kernel} and stride {stride} must be positive")));
    }
    if input < kernel {
        return Err(Error::config(format!("window {kernel} larger than input extent {input}")));
    }
    Ok((input - kernel) / stride + 1)
}

/// Forward state kept for [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    input_shape: [usize; 4],
    kernel: (usize, usize),
    stride: (usize, usize),
    out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let ncols = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for y in 0..oh {
                    let src_row = &plane[(y * sh + ki) * w..];
                    let dst_row = &mut dst[y * ow..(y + 1) * ow];
                    if sw == 1 {
                        dst_row.copy_from_slice(&src_row[kj..kj + ow]);
                    } else {
                        for (xo, d) in dst_row.iter_mut().enumerate() {
                            *d = src_row[xo * sw + kj];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let ncols = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for y in 0..oh {
                    let base = (y * sh + ki) * w + kj;
                    for xo in 0..ow {
                        plane[base + xo * sw] += src[y * ow + xo];
                    }
                }
            }
        }
    }
}

/// Convolves `input [N, C, H, W]` with `weights [K, C, kh, kw]` plus `bias [K]`.
///
/// No padding is applied; output extents follow [`output_extent`].
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (n, c, h, w) = input.dims4()?;
    let (k, wc, kh, kw) = weights.dims4()?;
    if wc != c {
        return Err(Error::config(format!("convolution expects {wc} input channels, got {c}")));
    }
    if bias.shape() != [k] {
        return Err(Error::config(format!("bias shape {:?} does not match {k} filters", bias.shape())));
    }
    let oh = output_extent(h, kh, stride.0)?;
    let ow = output_extent(w, kw, stride.1)?;
    let rows = c * kh * kw;
    let ncols = oh * ow;

    let mut cols = vec![T::zero(); n * rows * ncols];
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    for s in 0..n {
        let sample_cols = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
        im2col(input.sample(s), (c, h, w), (kh, kw), stride, (oh, ow), sample_cols);
        let dst = out.sample_mut(s);
        for (f, &b) in bias.data().iter().enumerate() {
            dst[f * ncols..(f + 1) * ncols].fill(b);
        }
        gemm(MatRef::new(weights.data(), k, rows), MatRef::new(sample_cols, rows, ncols), T::one(), dst);
    }
    out.check_finite("conv2d output")?;
    let cache = ConvCache { cols, input_shape: [n, c, h, w], kernel: (kh, kw), stride, out_hw: (oh, ow) };
    Ok((out, cache))
}

/// Gradients of the convolution given the upstream `grad_output [N, K, H', W']`.
pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    weights: &Tensor<T>,
    grad_output: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let [n, c, h, w] = cache.input_shape;
    let (k, _, kh, kw) = weights.dims4()?;
    let (oh, ow) = cache.out_hw;
    if grad_output.shape() != [n, k, oh, ow] {
        return Err(Error::shape(format!("conv grad_output {:?}, expected {:?}", grad_output.shape(), [n, k, oh, ow])));
    }
    let rows = c * kh * kw;
    let ncols = oh * ow;

    let mut grad_w = Tensor::zeros(weights.shape());
    let mut grad_b = Tensor::zeros(&[k]);
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(&[n, c, h, w]));
    let mut dcols = vec![T::zero(); if need_input_grad { rows * ncols } else { 0 }];

    for s in 0..n {
        let dy = grad_output.sample(s);
        let sample_cols = &cache.cols[s * rows * ncols..(s + 1) * rows * ncols];
        for (f, gb) in grad_b.data_mut().iter_mut().enumerate() {
            *gb += dy[f * ncols..(f + 1) * ncols].iter().fold(T::zero(), |a, &v| a + v);
        }
        gemm(MatRef::new(dy, k, ncols), MatRef::new(sample_cols, rows, ncols).t(), T::one(), grad_w.data_mut());
        if let Some(gi) = grad_in.as_mut() {
            gemm(MatRef::new(weights.data(), k, rows).t(), MatRef::new(dy, k, ncols), T::zero(), &mut dcols);
            col2im(&dcols, (c, h, w), (kh, kw), cache.stride, (oh, ow), gi.sample_mut(s));
        }
    }
    debug_assert_eq!(cache.kernel, (kh, kw));
    Ok(ConvGrads { input: grad_in, weights: grad_w, bias: grad_b })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct summation over every output element.
    fn conv_direct(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>, stride: (usize, usize)) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (k, _, kh, kw) = wt.dims4().unwrap();
        let oh = (h - kh) / stride.0 + 1;
        let ow = (w - kw) / stride.1 + 1;
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        for s in 0..n {
            for f in 0..k {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b.data()[f];
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let xv = x.data()[((s * c + ci) * h + y * stride.0 + i) * w + xo * stride.1 + j];
                                    let wv = wt.data()[((f * c + ci) * kh + i) * kw + j];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((s * k + f) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i * 7919) % 23) as f64 * scale - 0.4).collect()).unwrap()
    }

    #[test]
    fn two_by_two_diagonal_kernel() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let (y, _) = conv2d_forward(&x, &w, &b, (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = ramp(&[2, 1, 5, 4], 0.1);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let (y, _) = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), (1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn paper_branch_extent() {
        let x = Tensor::<f32>::zeros(&[1, 3, 25, 25]);
        let w = Tensor::zeros(&[2, 3, 4, 4]);
        let (y, _) = conv2d_forward(&x, &w, &Tensor::zeros(&[2]), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 22, 22]);
    }

    #[test]
    fn matches_direct_summation_with_stride() {
        let x = ramp(&[2, 3, 9, 8], 0.05);
        let w = ramp(&[4, 3, 3, 2], 0.03);
        let b = ramp(&[4], 0.1);
        for stride in [(1, 1), (2, 1), (2, 3)] {
            let (y, _) = conv2d_forward(&x, &w, &b, stride).unwrap();
            let want = conv_direct(&x, &w, &b, stride);
            assert_eq!(y.shape(), want.shape());
            for (a, e) in y.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&[1, 3, 2, 2]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), (1, 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let x = Tensor::<f32>::filled(&[1, 1, 2, 2], f32::MAX);
        let w = Tensor::filled(&[1, 1, 2, 2], f32::MAX);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), (1, 1)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn backward_without_input_grad_skips_it() {
        let x = ramp(&[1, 2, 4, 4], 0.1);
        let w = ramp(&[3, 2, 2, 2], 0.1);
        let (y, cache) = conv2d_forward(&x, &w, &Tensor::zeros(&[3]), (1, 1)).unwrap();
        let g = conv2d_backward(&cache, &w, &Tensor::filled(y.shape(), 1.0), false).unwrap();
        assert!(g.input.is_none());
        assert_eq!(g.bias.data(), &[9.0, 9.0, 9.0]);
    }
}
