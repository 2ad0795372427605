// SPDX-License-Identifier: Apache-2.0

//! Layer-by-layer moment propagation for any valid spec.
//!
//! Every step here is one of the public layer operations, with dense
//! covariances throughout, so this route is the reference for the fast
//! single-stage pipeline and the only route for deeper networks. Its cost
//! grows with the cube of the feature-map size; it is meant for inference
//! on small inputs.

use super::params::Model;
use super::pipeline::{kernel_key, Prediction};
use super::spec::{LayerSpec, Shape};
use crate::error::{Error, Result};
use crate::gaussian::{self, FactoredGaussian, GaussianVector};
use crate::layers::im2col::im2col_flat;
use crate::layers::pool::maxpool_moments_rect;
use crate::layers::{
    concat_channels, conv_forward_factored, conv_forward_random_input, dense_forward, gather_patches, softmax_taylor,
    ConvGeometry,
};
use crate::rng::NoiseKey;

enum Channel {
    /// Conv output of a deterministic input, covariance `F·Fᵀ`.
    Factored(FactoredGaussian),
    Dense(GaussianVector),
}

impl Channel {
    fn into_dense(self) -> Result<GaussianVector> {
        match self {
            Channel::Factored(f) => f.to_dense(),
            Channel::Dense(g) => Ok(g),
        }
    }
}

/// Output moments of every layer plus the final softmax.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Per-layer outputs: one Gaussian per channel for spatial layers, a
    /// single Gaussian for the dense layer.
    pub layers: Vec<Vec<GaussianVector>>,
    pub logits: GaussianVector,
    pub output: GaussianVector,
}

impl Trace {
    pub fn prediction(&self) -> Prediction {
        Prediction {
            mean: self.output.mean().to_owned(),
            cov: self.output.cov().to_owned(),
        }
    }
}

/// Propagates a deterministic image through `model`. Ensemble noise for
/// kernel `k` of layer `i` is keyed like the fast pipeline's, so on a
/// single-stage network both routes draw the same ε.
pub fn propagate(model: &Model, image: &[f64], key: NoiseKey) -> Result<Trace> {
    let spec = model.spec();
    let shapes = spec.shapes()?;
    let input = spec.input_shape();
    if image.len() != input.len() {
        return Err(Error::DimensionMismatch(format!(
            "image has {} values, network expects {}",
            image.len(),
            input.len()
        )));
    }
    let sizes = spec.ensemble_sizes()?;
    let mut ensemble_iter = sizes.into_iter();
    let mut prev: Shape = input;
    let mut channels: Option<Vec<Channel>> = None;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut logits = None;
    for (i, (layer, shape)) in spec.layers.iter().zip(&shapes).enumerate() {
        match *layer {
            LayerSpec::Conv { size, stride, .. } => {
                let geometry = ConvGeometry::new(prev.channels, prev.height, prev.width, size, stride)?;
                let kernels = model.conv_kernels(i)?;
                let next: Vec<Channel> = match channels.take() {
                    None => {
                        let patches = im2col_flat(image, geometry);
                        kernels
                            .iter()
                            .map(|k| conv_forward_factored(&patches, k).map(Channel::Factored))
                            .collect::<Result<_>>()?
                    }
                    Some(chs) => {
                        let dense: Vec<GaussianVector> =
                            chs.into_iter().map(Channel::into_dense).collect::<Result<_>>()?;
                        let stacked = gather_patches(&concat_channels(&dense)?, geometry)?;
                        kernels
                            .iter()
                            .map(|k| conv_forward_random_input(&stacked, k).map(Channel::Dense))
                            .collect::<Result<_>>()?
                    }
                };
                channels = Some(next);
            }
            LayerSpec::Activation { function, .. } => {
                let n = ensemble_iter.next().expect("one size per activation");
                let chs = channels.take().expect("activation follows conv");
                let next = chs
                    .into_iter()
                    .enumerate()
                    .map(|(k, ch)| {
                        let kkey = kernel_key(key, i - 1, k);
                        let samples = match ch {
                            Channel::Factored(f) if f.factor.iter().any(|&v| v != 0.0) => f.sample(n, kkey)?,
                            Channel::Factored(f) => {
                                return Ok(Channel::Dense(GaussianVector::point(
                                    f.mean.mapv(|v| function.apply(v)),
                                )))
                            }
                            Channel::Dense(g) if g.is_point_mass() => {
                                return Ok(Channel::Dense(GaussianVector::point(
                                    g.mean().mapv(|v| function.apply(v)),
                                )))
                            }
                            Channel::Dense(g) => gaussian::sample_ensemble(&g, n, kkey)?,
                        };
                        gaussian::ensemble_moments(&samples.map(|v| function.apply(v))).map(Channel::Dense)
                    })
                    .collect::<Result<Vec<_>>>()?;
                channels = Some(next);
            }
            LayerSpec::Maxpool { patch, stride } => {
                let chs = channels.take().expect("pool follows conv");
                let next = chs
                    .into_iter()
                    .map(|ch| {
                        let g = ch.into_dense()?;
                        maxpool_moments_rect(&g, prev.height, prev.width, patch, stride).map(|(g, _)| Channel::Dense(g))
                    })
                    .collect::<Result<Vec<_>>>()?;
                channels = Some(next);
            }
            LayerSpec::Dense { .. } => {
                let chs = channels.take().expect("dense follows a spatial layer");
                let dense: Vec<GaussianVector> = chs.into_iter().map(Channel::into_dense).collect::<Result<_>>()?;
                let f = dense_forward(&concat_channels(&dense)?, &model.dense_weight(i)?)?;
                layers.push(vec![f.clone()]);
                logits = Some(f);
                prev = *shape;
                continue;
            }
        }
        let snapshot = channels
            .as_ref()
            .expect("spatial layer output")
            .iter()
            .map(|c| match c {
                Channel::Factored(f) => f.to_dense(),
                Channel::Dense(g) => Ok(g.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(snapshot);
        prev = *shape;
    }
    let logits = logits.expect("validated spec ends in dense");
    let output = softmax_taylor(&logits)?;
    Ok(Trace { layers, logits, output })
}
