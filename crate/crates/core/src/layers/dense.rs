use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    /// `[outputs, inputs]`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `y = x W^T + b` for `x [N, inputs]`.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, params: &DenseParams<T>) -> Result<Tensor<T>> {
    let (n, d) = input.dims2()?;
    let (o, wd) = params.weights.dims2()?;
    if wd != d || params.bias.shape() != [o] {
        return Err(Error::config(format!(
            "dense layer {:?}/{:?} cannot take input {:?}",
            params.weights.shape(),
            params.bias.shape(),
            input.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, o]);
    for row in out.data_mut().chunks_mut(o) {
        row.copy_from_slice(params.bias.data());
    }
    gemm(MatRef::new(input.data(), n, d), MatRef::new(params.weights.data(), o, d).t(), T::one(), out.data_mut());
    out.check_finite("dense output")?;
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &DenseParams<T>,
    grad_output: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, d) = input.dims2()?;
    let o = params.outputs();
    if grad_output.shape() != [n, o] {
        return Err(Error::shape(format!("dense grad_output {:?}, expected {:?}", grad_output.shape(), [n, o])));
    }
    let dy = grad_output.data();
    let mut gw = Tensor::zeros(&[o, d]);
    gemm(MatRef::new(dy, n, o).t(), MatRef::new(input.data(), n, d), T::zero(), gw.data_mut());
    let mut gb = Tensor::zeros(&[o]);
    for row in dy.chunks(o) {
        for (b, &g) in gb.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut gx = Tensor::zeros(&[n, d]);
    gemm(MatRef::new(dy, n, o), MatRef::new(params.weights.data(), o, d), T::zero(), gx.data_mut());
    Ok(DenseGrads { input: gx, weights: gw, bias: gb })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_by_hand() {
        let p = DenseParams {
            weights: Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap(),
            bias: Tensor::from_vec(&[2], vec![0.1, -0.1]).unwrap(),
        };
        let x = Tensor::from_vec(&[1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        let y = dense_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[-3.9, 5.9]);
    }

    #[test]
    fn rejects_wrong_width() {
        let p = DenseParams { weights: Tensor::<f32>::zeros(&[2, 3]), bias: Tensor::zeros(&[2]) };
        assert!(dense_forward(&Tensor::zeros(&[1, 4]), &p).is_err());
    }
}
