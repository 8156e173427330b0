//! Dense CPU tensors with tape-based reverse-mode autodiff and the operator
//! set of a small convolutional detector: convolution (dense, grouped,
//! depthwise, pointwise), batch norm, pooling, unfold, upsampling,
//! modulated deformable convolution and triplet attention.

pub mod attention;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod real;
pub mod reference;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use nn::batchnorm::{update_running, BatchStats};
pub use real::Real;
pub use tape::{Gradients, OpEvent, OpKind, PoolKind, ReduceKind, Tape, Var};
pub use tensor::Tensor;
