use crate::error::{Error, Result};
use crate::layers::conv::output_extent;
use crate::tensor::{Scalar, Tensor};

/// Argmax positions of a max-pool forward pass.
///
/// Each entry is the flat offset, within its `H x W` input plane, of the
/// element that won the corresponding output window.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub argmax: Vec<u32>,
    input_shape: [usize; 4],
}

/// Max pooling over valid windows. Ties resolve to the first element in
/// row-major scan order of the window.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, PoolCache)> {
    let (n, c, h, w) = input.dims4()?;
    let oh = output_extent(h, kernel.0, stride.0)?;
    let ow = output_extent(w, kernel.1, stride.1)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let x = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let (y0, x0) = (y * stride.0, xo * stride.1);
                let mut best = y0 * w + x0;
                let mut best_v = x[best];
                for i in 0..kernel.0 {
                    for j in 0..kernel.1 {
                        let idx = (y0 + i) * w + x0 + j;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                let o = (plane * oh + y) * ow + xo;
                dst[o] = best_v;
                argmax[o] = best as u32;
            }
        }
    }
    Ok((out, PoolCache { argmax, input_shape: [n, c, h, w] }))
}

/// Routes each output gradient to the input element that produced the max.
pub fn maxpool_backward<T: Scalar>(cache: &PoolCache, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = cache.input_shape;
    if grad_output.len() != cache.argmax.len() || grad_output.shape()[..2] != [n, c] {
        return Err(Error::shape(format!(
            "maxpool grad_output {:?} does not match the cached forward",
            grad_output.shape()
        )));
    }
    let per_plane = cache.argmax.len() / (n * c);
    let mut grad = Tensor::zeros(&[n, c, h, w]);
    let gd = grad.data_mut();
    for (o, (&g, &a)) in grad_output.data().iter().zip(&cache.argmax).enumerate() {
        let plane = o / per_plane;
        gd[plane * h * w + a as usize] += g;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_of_all() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(cache.argmax, vec![3]);
    }

    #[test]
    fn unit_stride_on_two_by_two() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool_forward(&x, (2, 2), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
    }

    #[test]
    fn constant_input_picks_first_index() {
        let x = Tensor::<f32>::filled(&[1, 2, 4, 4], 0.7);
        let (y, cache) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        // window origins in scan order
        assert_eq!(&cache.argmax[..4], &[0, 2, 8, 10]);
    }

    #[test]
    fn window_larger_than_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 3]);
        assert!(matches!(maxpool_forward(&x, (2, 2), (1, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn backward_routes_to_argmax_and_accumulates_overlaps() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 3], vec![0.0, 5.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = maxpool_forward(&x, (2, 2), (1, 1)).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
        let g = maxpool_backward(&cache, &Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
