//! Forward kernels and their vector-Jacobian products.
//!
//! These are plain functions on [`Tensor`](crate::Tensor); the
//! [`Tape`](crate::Tape) records them for reverse-mode differentiation.

mod conv;
mod elementwise;
mod reduce;
mod shape;

pub use conv::{
    conv2d, conv2d_backward, conv3d_grouped_single_plane, conv3d_grouped_single_plane_backward, Conv2dGeometry,
    Conv3dGeometry,
};
pub use elementwise::{
    add, affine_combine, affine_combine_backward, broadcast_shape, channel_affine, channel_affine_backward,
    channel_moments, channel_standardize, channel_standardize_backward, hadamard, relu, sigmoid, sub, sum_to_shape,
    tanh,
};
pub use reduce::{
    avg_pool_spatial, avg_pool_spatial_backward, linear, linear_backward, mean_axis, mean_axis_backward,
    softmax_cross_entropy, softmax_cross_entropy_backward, softmax_rows,
};
pub use shape::{
    concat_axis, inverse_permutation, permute, shift_time, slice_axis, slice_axis_backward, ShiftDirection,
};
