// SPDX-License-Identifier: Apache-2.0

//! Ensemble density propagation for Bayesian convolutional networks.

// `!(x >= 0.0)` is how argument checks reject NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gaussian;
pub mod layers;
pub mod linalg;
pub mod network;
pub mod objective;
pub mod oracle;
pub mod rng;
pub mod robustness;
pub mod train;

pub use error::{Error, Result};
pub use gaussian::{CholeskyFactor, Ensemble, FactoredGaussian, GaussianVector};
pub use rng::NoiseKey;
