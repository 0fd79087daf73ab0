//! Sparse mixture-of-experts vision-language decoder, trained from scratch on
//! synthetic overhead scenes.

pub mod augment;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 64-bit tensor, the precision used for training and checkpoints.
pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape = tensor::Tape<f64>;
