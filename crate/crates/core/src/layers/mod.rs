// SPDX-License-Identifier: Apache-2.0

//! Moment propagation through each layer type.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod factor;
pub mod im2col;
pub mod pool;
pub mod softmax;

pub use activation::{activation_endp, activation_taylor, Activation};
pub use conv::{conv_forward, conv_forward_factored, conv_forward_random_input, gather_patches, VariationalConvKernel};
pub use dense::{concat_channels, dense_forward, VariationalDenseWeight};
pub use factor::CovFactor;
pub use im2col::{im2col, ConvGeometry, PatchMatrix};
pub use pool::{maxpool_moments, PoolPlan};
pub use softmax::{softmax, softmax_jacobian, softmax_taylor};
