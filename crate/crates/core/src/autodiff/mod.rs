//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{sigmoid_stable, softplus_stable, Gradients, Tape, Var};
pub use tensor::{
    batched_matmul3, binary_broadcast, broadcast_shapes, broadcast_to, concat, matmul2,
    matmul2_acc, reduce_to_shape, slice_axis, strides_of, sum_axes, transpose2, Tensor,
};
