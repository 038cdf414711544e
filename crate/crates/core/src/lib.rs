//! Compact high-resolution 3D segmentation: dilated convolutions with
//! pre-activation residual blocks, Dice training, Monte Carlo dropout
//! uncertainty and receptive-field analysis, all on the CPU.

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod infer;
pub mod io;
pub mod loss;
pub mod network;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Shape, Tensor};
