// SPDX-License-Identifier: Apache-2.0

//! Networks: declarative spec, parameters, and the forward/reverse passes.

pub mod params;
pub mod pipeline;
pub mod propagate;
pub mod spec;

pub use params::{Layout, Model};
pub use pipeline::{forward_backward, ExampleOutput, LossKind, Prediction, Stage, Want};
pub use propagate::{propagate, Trace};
pub use spec::{CovarianceKind, EnsembleSize, LayerSpec, ModelKind, NetworkSpec, Shape};

use crate::error::Result;
use crate::rng::NoiseKey;

/// Step index reserved for evaluation noise, disjoint from training steps.
pub const EVAL_STEP: u64 = u64::MAX;

impl Model {
    /// Whether the fast single-stage pipeline (and therefore training)
    /// supports this architecture.
    pub fn is_trainable(&self) -> bool {
        Stage::from_spec(self.spec()).is_ok()
    }

    /// Output moments for one image. Uses the fast pipeline when the
    /// architecture allows, layer-by-layer propagation otherwise.
    pub fn predict(&self, image: &[f64], key: NoiseKey) -> Result<Prediction> {
        if self.is_trainable() {
            let out = forward_backward(
                self,
                image,
                0,
                key,
                LossKind::default_for(self.kind()),
                crate::objective::DEFAULT_VAR_FLOOR,
                Want::NONE,
            )?;
            Ok(out.prediction)
        } else {
            Ok(propagate(self, image, key)?.prediction())
        }
    }
}

/// Evaluation key for example `index` under `seed`.
pub fn eval_key(seed: u64, index: u64) -> NoiseKey {
    NoiseKey::new(seed, 0, EVAL_STEP, index)
}
