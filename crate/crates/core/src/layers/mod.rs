//! Forward and backward kernels for every layer kind used by the networks.
//!
//! Each forward function returns its output together with whatever state the
//! matching backward function needs. Backward passes are derived by hand.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod pool;

pub use activation::{dropout_backward, dropout_forward, relu_backward, relu_forward, DropoutMask};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormConfig, BatchNormParams};
pub use conv::{conv2d_backward, conv2d_forward, output_extent, ConvCache, ConvGrads};
pub use dense::{dense_backward, dense_forward, DenseGrads, DenseParams};
pub use loss::{argmax, softmax_cross_entropy, softmax_cross_entropy_batch, BatchLoss};
pub use pool::{maxpool_backward, maxpool_forward, PoolCache};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
