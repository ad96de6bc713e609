//! Dense row-major `f64` tensors with define-by-run reverse-mode autodiff.
//!
//! Every op builds a new immutable [`Tensor`]; when any input participates in
//! gradient tracking the result records a closure that maps the output
//! gradient onto its inputs. [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates into each node's `grad` buffer.

mod error;
pub mod gradcheck;
mod kernels;
mod ops;
mod param;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::attention::multi_head_attention;
pub use ops::conv::conv2d;
pub use ops::loss::{
    focal_term, giou_corners, sigmoid_focal_loss, GiouParts,
};
pub use ops::sampling::{bilinear_sample, ms_deform_sample, LevelShape};
pub use ops::elementwise::sum_all;
pub use ops::shape::{concat_cols, concat_rows};
pub use param::Parameter;
pub use tensor::{is_grad_enabled, no_grad, BackwardFn, Tensor};
