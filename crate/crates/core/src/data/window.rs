//! Context windows centered on a pixel, mirrored at image borders.

use crate::data::stack::{Sample, TemporalImageStack};
use crate::error::{Error, Result};
use crate::net::AvailabilityMask;
use crate::tensor::Tensor;

/// Maps a possibly out-of-range coordinate into `0..n` by mirror reflection
/// about the first and last pixel (the border pixel itself is not repeated).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::config(format!("window size must be odd and positive, got {size}")));
    }
    Ok(())
}

fn fill_window(stack: &TemporalImageStack, image: &Tensor<f32>, x: usize, y: usize, size: usize, out: &mut [f32]) {
    let (h, w) = (stack.height, stack.width);
    let half = (size / 2) as isize;
    let cols: Vec<usize> = (0..size).map(|j| reflect(x as isize + j as isize - half, w)).collect();
    let src = image.data();
    for c in 0..stack.channels {
        for i in 0..size {
            let row = reflect(y as isize + i as isize - half, h);
            let base = (c * h + row) * w;
            let dst = &mut out[(c * size + i) * size..(c * size + i + 1) * size];
            for (d, &col) in dst.iter_mut().zip(&cols) {
                *d = src[base + col];
            }
        }
    }
}

/// `[ch, size, size]` window of timestamp `j` centered on `(x, y)`.
pub fn extract_window(stack: &TemporalImageStack, x: usize, y: usize, j: usize, size: usize) -> Result<Tensor<f32>> {
    check_size(size)?;
    if x >= stack.width || y >= stack.height {
        return Err(Error::input(format!("pixel ({x}, {y}) outside a {}x{} image", stack.width, stack.height)));
    }
    let image = stack.image(j)?;
    let mut out = Tensor::zeros(&[stack.channels, size, size]);
    fill_window(stack, image, x, y, size, out.data_mut());
    Ok(out)
}

/// `[N, ch, size, size]` windows of timestamp `j` for every sample.
pub fn extract_batch(stack: &TemporalImageStack, samples: &[Sample], j: usize, size: usize) -> Result<Tensor<f32>> {
    check_size(size)?;
    let image = stack.image(j)?;
    let mut out = Tensor::zeros(&[samples.len(), stack.channels, size, size]);
    for (n, s) in samples.iter().enumerate() {
        if s.x >= stack.width || s.y >= stack.height {
            return Err(Error::input(format!("pixel ({}, {}) outside the image", s.x, s.y)));
        }
        fill_window(stack, image, s.x, s.y, size, out.sample_mut(n));
    }
    Ok(out)
}

/// Windows for every timestamp available in `mask`; `None` elsewhere.
pub fn extract_timestamps(
    stack: &TemporalImageStack,
    samples: &[Sample],
    mask: &AvailabilityMask,
    size: usize,
) -> Result<Vec<Option<Tensor<f32>>>> {
    (0..stack.len())
        .map(|j| if mask.is_available(j) { extract_batch(stack, samples, j, size).map(Some) } else { Ok(None) })
        .collect()
}
