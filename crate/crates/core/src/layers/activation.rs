use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU; the derivative at exactly zero is taken as 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_output.shape() {
        return Err(Error::shape(format!("relu grad_output {:?} vs input {:?}", grad_output.shape(), input.shape())));
    }
    let data =
        input.data().iter().zip(grad_output.data()).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(input.shape(), data)
}

/// Per-element multiplier applied by inverted dropout: 0 for dropped units,
/// `1 / keep_prob` for kept ones.
#[derive(Debug, Clone)]
pub struct DropoutMask<T> {
    pub scale: Vec<T>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn kept(&self) -> usize {
        self.scale.iter().filter(|&&s| s != T::zero()).count()
    }
}

pub fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("keep probability must lie in (0, 1], got {keep_prob}")))
    }
}

/// Inverted dropout. Eval mode (or `keep_prob == 1`) is the identity and
/// consumes no randomness.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    keep_prob: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor<T>, DropoutMask<T>)> {
    check_keep_prob(keep_prob)?;
    if mode == Mode::Eval || keep_prob == 1.0 {
        return Ok((input.clone(), DropoutMask { scale: vec![T::one(); input.len()] }));
    }
    let inv = T::from_f64(1.0 / keep_prob);
    let scale: Vec<T> = (0..input.len()).map(|_| if rng.gen::<f64>() < keep_prob { inv } else { T::zero() }).collect();
    let data = input.data().iter().zip(&scale).map(|(&x, &s)| x * s).collect();
    Ok((Tensor::from_vec(input.shape(), data)?, DropoutMask { scale }))
}

pub fn dropout_backward<T: Scalar>(mask: &DropoutMask<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.scale.len() != grad_output.len() {
        return Err(Error::shape("dropout mask does not match grad_output".to_string()));
    }
    let data = grad_output.data().iter().zip(&mask.scale).map(|(&g, &s)| g * s).collect();
    Tensor::from_vec(grad_output.shape(), data)
}
