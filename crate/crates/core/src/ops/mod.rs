//! Layer primitives with forward and backward rules.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dropout;

pub use activation::{relu, relu_backward, softmax_backward, softmax_channels};
pub use batchnorm::{batchnorm, BatchNormMode, BatchNormState};
pub use conv::{conv3d_backward, conv3d_forward, ConvAlgo, ConvKernel, Padding};
pub use dropout::{dropout, DropoutMask};
