// SPDX-License-Identifier: Apache-2.0

//! Moment propagation through elementwise nonlinearities.
//!
//! [`activation_endp`] is the ensemble route: draw `N` members from the
//! input Gaussian, push each through the nonlinearity and take the sample
//! mean and covariance. [`activation_taylor`] is the first-order
//! linearization at the mean, kept as a comparison backend.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianVector};
use crate::rng::NoiseKey;

const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Selu,
    Swish,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Relu,
        Activation::Elu,
        Activation::Selu,
        Activation::Swish,
        Activation::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Selu => "selu",
            Activation::Swish => "swish",
            Activation::Identity => "identity",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_SCALE * x
                } else {
                    SELU_SCALE * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Swish => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative; kinks take the right-hand value at 0 for ReLU's 0 branch
    /// (`relu'(0) = 0`).
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_SCALE
                } else {
                    SELU_SCALE * SELU_ALPHA * x.exp()
                }
            }
            Activation::Swish => {
                let s = 1.0 / (1.0 + (-x).exp());
                s + x * s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownActivation(s.to_string()))
    }
}

/// Ensemble moments of `act(z)` from `n` draws keyed by `key`.
pub fn activation_endp(z: &GaussianVector, act: Activation, n: usize, key: NoiseKey) -> Result<GaussianVector> {
    let ensemble = gaussian::sample_ensemble(z, n, key)?;
    gaussian::ensemble_moments(&ensemble.map(|v| act.apply(v)))
}

/// First-order Taylor propagation: `N(act(μ), D·Σ·D)` with `D = diag(act'(μ))`.
pub fn activation_taylor(z: &GaussianVector, act: Activation) -> Result<GaussianVector> {
    let mean = z.mean().mapv(|v| act.apply(v));
    let d = z.mean().mapv(|v| act.derivative(v));
    let cov = Array2::from_shape_fn((z.dim(), z.dim()), |(i, j)| d[i] * z.cov()[[i, j]] * d[j]);
    GaussianVector::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn parses_known_names_only() {
        for a in Activation::ALL {
            assert_eq!(a.name().parse::<Activation>().unwrap(), a);
        }
        assert!(matches!("gelu".parse::<Activation>(), Err(Error::UnknownActivation(_))));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for a in Activation::ALL {
            for &x in &[-2.0, -0.3, 0.4, 1.7] {
                let h = 1e-6;
                let fd = (a.apply(x + h) - a.apply(x - h)) / (2.0 * h);
                assert!((fd - a.derivative(x)).abs() < 1e-6, "{a} at {x}");
            }
        }
    }

    #[test]
    fn point_mass_input_maps_mean() {
        let z = GaussianVector::point(array![-1.0, 0.5, 2.0]);
        for a in Activation::ALL {
            let out = activation_endp(&z, a, 16, NoiseKey::from_seed(3)).unwrap();
            assert!(out.is_point_mass());
            for (o, m) in out.mean().iter().zip(z.mean().iter()) {
                assert_eq!(*o, a.apply(*m));
            }
        }
    }

    #[test]
    fn identity_recovers_input_moments() {
        let cov = array![[1.0, 0.3], [0.3, 0.5]];
        let z = GaussianVector::new(array![0.5, -1.0], cov.clone()).unwrap();
        let out = activation_endp(&z, Activation::Identity, 100_000, NoiseKey::from_seed(5)).unwrap();
        let rel = crate::linalg::frobenius((&out.cov() - &cov).view()) / crate::linalg::frobenius(cov.view());
        assert!(rel < 0.02, "{rel}");
        assert!((&out.mean() - &z.mean()).iter().all(|d| d.abs() < 0.02));
    }

    #[test]
    fn taylor_identity_and_linear_region() {
        let z = GaussianVector::new(array![2.0, 3.0], array![[1e-6, 0.0], [0.0, 2e-6]]).unwrap();
        let id = activation_taylor(&z, Activation::Identity).unwrap();
        assert_eq!(id, z);
        let relu = activation_taylor(&z, Activation::Relu).unwrap();
        assert_eq!(relu, z);
    }

    #[test]
    fn rejects_tiny_ensembles() {
        let z = GaussianVector::isotropic(array![0.0], 1.0);
        assert!(matches!(
            activation_endp(&z, Activation::Relu, 1, NoiseKey::from_seed(0)),
            Err(Error::EnsembleTooSmall(1))
        ));
    }
}
