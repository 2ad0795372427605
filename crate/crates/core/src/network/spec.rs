// SPDX-License-Identifier: Apache-2.0

//! Declarative architecture description and shape inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::im2col::ConvGeometry;
use crate::layers::pool::pooled_side;
use crate::layers::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Moments propagated through every layer.
    #[default]
    Endp,
    /// Point-estimate weights, zero covariances (the vanilla CNN baseline).
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

/// Ensemble size of an activation layer: a fixed count or `"auto"`, which
/// is twice the per-channel feature-map size of the preceding convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnsembleSize {
    Fixed(usize),
    Rule(EnsembleRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleRule {
    Auto,
}

impl EnsembleSize {
    pub fn resolve(self, feature_dim: usize) -> usize {
        match self {
            EnsembleSize::Fixed(n) => n,
            EnsembleSize::Rule(EnsembleRule::Auto) => 2 * feature_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        kernels: usize,
        size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        covariance: CovarianceKind,
    },
    Activation {
        function: Activation,
        ensemble: EnsembleSize,
    },
    Maxpool {
        patch: usize,
        stride: usize,
    },
    Dense {
        outputs: usize,
        #[serde(default)]
        covariance: CovarianceKind,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(default)]
    pub model: ModelKind,
    pub layers: Vec<LayerSpec>,
}

/// Shape of the activations after a layer: `channels × height × width`, or a
/// flat vector after the dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl NetworkSpec {
    /// The one-conv-layer MNIST network: 32 kernels 5×5, ReLU, 2×2/2 pooling,
    /// dense to 10 classes.
    pub fn mnist(ensemble: usize) -> Self {
        NetworkSpec {
            input: [1, 28, 28],
            classes: 10,
            model: ModelKind::Endp,
            layers: vec![
                LayerSpec::Conv {
                    kernels: 32,
                    size: 5,
                    stride: 1,
                    covariance: CovarianceKind::Full,
                },
                LayerSpec::Activation {
                    function: Activation::Relu,
                    ensemble: EnsembleSize::Fixed(ensemble),
                },
                LayerSpec::Maxpool { patch: 2, stride: 2 },
                LayerSpec::Dense {
                    outputs: 10,
                    covariance: CovarianceKind::Diagonal,
                },
            ],
        }
    }

    /// Three blocks of two 3×3 convolutions with ELU, each block closed by
    /// 2×2 pooling, then dense. Uses the `N_i = 2 d_i` ensemble rule.
    ///
    /// The convolutions are unpadded, so the input must be large enough for
    /// three blocks; `side` is the input side length (at least 36).
    pub fn cifar_like(side: usize) -> Self {
        let mut layers = Vec::new();
        for kernels in [32, 64, 128] {
            for _ in 0..2 {
                layers.push(LayerSpec::Conv {
                    kernels,
                    size: 3,
                    stride: 1,
                    covariance: CovarianceKind::Full,
                });
                layers.push(LayerSpec::Activation {
                    function: Activation::Elu,
                    ensemble: EnsembleSize::Rule(EnsembleRule::Auto),
                });
            }
            layers.push(LayerSpec::Maxpool { patch: 2, stride: 2 });
        }
        layers.push(LayerSpec::Dense {
            outputs: 10,
            covariance: CovarianceKind::Diagonal,
        });
        NetworkSpec {
            input: [3, side, side],
            classes: 10,
            model: ModelKind::Endp,
            layers,
        }
    }

    pub fn input_shape(&self) -> Shape {
        Shape {
            channels: self.input[0],
            height: self.input[1],
            width: self.input[2],
        }
    }

    /// Output shape of every layer, validating the whole stack.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let bad = |msg: String| Error::InvalidSpec(msg);
        let mut shape = self.input_shape();
        if shape.is_empty() {
            return Err(bad("input shape has a zero dimension".into()));
        }
        if self.classes < 2 {
            return Err(bad("at least two classes are required".into()));
        }
        if !matches!(self.layers.first(), Some(LayerSpec::Conv { .. })) {
            return Err(bad("the first layer must be a convolution".into()));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut flattened = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if flattened {
                return Err(bad(format!("layer {i} follows the dense layer")));
            }
            shape = match *layer {
                LayerSpec::Conv {
                    kernels, size, stride, ..
                } => {
                    if kernels == 0 {
                        return Err(bad(format!("layer {i}: zero kernels")));
                    }
                    let g = ConvGeometry::new(shape.channels, shape.height, shape.width, size, stride)
                        .map_err(|e| bad(format!("layer {i}: {e}")))?;
                    Shape {
                        channels: kernels,
                        height: g.out_height(),
                        width: g.out_width(),
                    }
                }
                LayerSpec::Activation { ensemble, .. } => {
                    if self.model == ModelKind::Endp && ensemble.resolve(shape.plane()) < 2 {
                        return Err(bad(format!("layer {i}: ensemble size must be at least 2")));
                    }
                    shape
                }
                LayerSpec::Maxpool { patch, stride } => {
                    let h = pooled_side(shape.height, patch, stride).map_err(|e| bad(format!("layer {i}: {e}")))?;
                    let w = pooled_side(shape.width, patch, stride).map_err(|e| bad(format!("layer {i}: {e}")))?;
                    Shape {
                        channels: shape.channels,
                        height: h,
                        width: w,
                    }
                }
                LayerSpec::Dense { outputs, .. } => {
                    if outputs != self.classes {
                        return Err(bad(format!(
                            "dense layer has {outputs} outputs but the network has {} classes",
                            self.classes
                        )));
                    }
                    flattened = true;
                    Shape {
                        channels: outputs,
                        height: 1,
                        width: 1,
                    }
                }
            };
            out.push(shape);
        }
        if !flattened {
            return Err(bad("the last layer must be dense".into()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Resolved ensemble size of every activation layer, in order.
    pub fn ensemble_sizes(&self) -> Result<Vec<usize>> {
        let shapes = self.shapes()?;
        let mut prev = self.input_shape();
        let mut sizes = Vec::new();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            if let LayerSpec::Activation { ensemble, .. } = layer {
                sizes.push(ensemble.resolve(prev.plane()));
            }
            prev = *shape;
        }
        Ok(sizes)
    }

    /// Overrides every activation layer's ensemble size.
    pub fn with_ensemble(mut self, n: usize) -> Self {
        for layer in &mut self.layers {
            if let LayerSpec::Activation { ensemble, .. } = layer {
                *ensemble = EnsembleSize::Fixed(n);
            }
        }
        self
    }

    pub fn with_model(mut self, model: ModelKind) -> Self {
        self.model = model;
        self
    }

    /// Input dimension of the dense layer.
    pub fn dense_inputs(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(shapes[shapes.len() - 2].len())
    }
}
