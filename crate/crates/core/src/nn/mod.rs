//! The closed layer set of the detector: forward and backward passes for
//! convolution, transposed convolution, pooling, activations, batch norm,
//! dropout and dense layers.

pub mod activation;
pub mod conv;
pub mod dropout;
mod kernels;
pub mod linear;
pub mod norm;
pub mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, softmax, softmax_backward};
pub use conv::{
    conv2d, conv2d_backward, conv_transpose2x2, conv_transpose2x2_backward, Conv2d,
    ConvTranspose2x2,
};
pub use dropout::{dropout, dropout2d, dropout_backward, DropoutMask};
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2, maxpool2_backward};

use rand::Rng;

use crate::tensor::{Dims, Real, Tensor4};

/// Whether stochastic layers and batch statistics are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// He-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn he_uniform<T: Real>(dims: Dims, fan_in: usize, rng: &mut impl Rng) -> Tensor4<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor4::from_fn(dims, |_, _, _, _| T::of(rng.gen_range(-bound..bound)))
}
