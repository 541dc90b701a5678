//! Minimal dense tensor library with define-by-run reverse-mode autodiff.
//!
//! Values are `f64` [`Tensor`]s. Differentiable programs are written against
//! [`Var`] handles recorded on a [`Tape`]; [`Tape::backward`] replays the tape
//! in reverse from a scalar root. [`gradcheck`] holds the finite-difference
//! oracle used to validate every backward rule.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::{conv2d_tensor, output_extent, Conv2dSpec};
pub use ops::dropout::dropout_mask;
pub use ops::elementwise::{broadcast_apply, elementwise, sigmoid_scalar, ElementwiseOp};
pub use ops::linalg::dense;
pub use ops::pool::PoolKind;
pub use ops::reduce::{softmax_tensor, ReduceKind};
pub use ops::shape::concat;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, standard_normal, Tensor};
