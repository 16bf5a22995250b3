//! Dense N-dimensional arrays plus a per-step tape for reverse-mode
//! differentiation, sized for small convolutional networks.
//!
//! Everything is generic over [`Scalar`] so the same code paths run at
//! `f32` for training and `f64` for verification.

mod error;
mod gradcheck;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig};
pub use graph::{ElementwiseOp, GradMap, Graph, Operand, Resample, Var};
pub use ops::{conv2d, conv2d_output_size, resample2x};
pub use scalar::Scalar;
pub use tensor::Tensor;
