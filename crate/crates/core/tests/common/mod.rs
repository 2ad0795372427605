// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use endp::data::Dataset;
use endp::layers::Activation;
use endp::network::{CovarianceKind, EnsembleSize, LayerSpec, ModelKind, NetworkSpec};
use endp::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 1×6×6 input, four 3×3 kernels, pool 2/2, dense to `classes`.
pub fn toy_spec(kind: ModelKind, act: Activation, n: usize, classes: usize) -> NetworkSpec {
    NetworkSpec {
        input: [1, 6, 6],
        classes,
        model: kind,
        layers: vec![
            LayerSpec::Conv {
                kernels: 4,
                size: 3,
                stride: 1,
                covariance: CovarianceKind::Full,
            },
            LayerSpec::Activation {
                function: act,
                ensemble: EnsembleSize::Fixed(n),
            },
            LayerSpec::Maxpool { patch: 2, stride: 2 },
            LayerSpec::Dense {
                outputs: classes,
                covariance: CovarianceKind::Full,
            },
        ],
    }
}

/// Bars on a noisy background: class 0 horizontal, 1 vertical, 2 diagonal.
/// Both model kinds fit three classes within a few hundred steps.
pub fn bars(count: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count * 36);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let c = i % classes;
        let at = r.gen_range(1..5);
        for y in 0..6 {
            for x in 0..6 {
                let on = match c {
                    0 => y == at,
                    1 => x == at,
                    _ => x == y,
                };
                let base = if on { 0.8 } else { 0.1 };
                images.push((base + 0.2 * r.gen::<f64>()).min(1.0));
            }
        }
        labels.push(c);
    }
    Dataset::new("bars", "train", [1, 6, 6], classes, images, labels).unwrap()
}

/// Training settings that fit `bars` with either model kind.
///
/// The Gaussian likelihood needs a wide variance floor here: at 1e-3 the
/// early gradient goes into inflating the weight variance and the fit of
/// the mean stalls.
pub fn toy_training(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 1e-2,
        seed,
        var_floor: 0.1,
        ..TrainConfig::default()
    }
}
