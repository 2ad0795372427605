// SPDX-License-Identifier: Apache-2.0

use endp::data::Dataset;
use endp::layers::Activation;
use endp::network::{
    eval_key, forward_backward, propagate, CovarianceKind, EnsembleSize, LayerSpec, LossKind, Model, ModelKind,
    NetworkSpec, Want,
};
use endp::train::{check_gradients, ObjectiveSettings};
use endp::NoiseKey;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_spec(act: Activation, pool: bool, dense: CovarianceKind, n: usize) -> NetworkSpec {
    let mut layers = vec![
        LayerSpec::Conv {
            kernels: 1,
            size: 3,
            stride: 1,
            covariance: CovarianceKind::Full,
        },
        LayerSpec::Activation {
            function: act,
            ensemble: EnsembleSize::Fixed(n),
        },
    ];
    if pool {
        layers.push(LayerSpec::Maxpool { patch: 2, stride: 2 });
    }
    layers.push(LayerSpec::Dense {
        outputs: 3,
        covariance: dense,
    });
    NetworkSpec {
        input: [1, 6, 6],
        classes: 3,
        model: ModelKind::Endp,
        layers,
    }
}

fn toy_data(count: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count * 36).map(|_| rng.gen::<f64>()).collect();
    let labels = (0..count).map(|i| i % 3).collect();
    Dataset::new("toy", "train", [1, 6, 6], 3, images, labels).unwrap()
}

fn settings(loss: LossKind) -> ObjectiveSettings {
    ObjectiveSettings {
        loss,
        var_floor: 1e-3,
        prior_var: 1.0,
        kl_scale: 0.01,
    }
}

#[test]
fn fast_pipeline_matches_layer_by_layer_propagation() {
    for (act, pool, dense) in [
        (Activation::Relu, true, CovarianceKind::Full),
        (Activation::Elu, false, CovarianceKind::Diagonal),
    ] {
        let model = Model::init(toy_spec(act, pool, dense, 40), 7).unwrap();
        let ds = toy_data(3, 1);
        for i in 0..3 {
            let key = eval_key(5, i as u64);
            let fast = forward_backward(&model, ds.image(i), 0, key, LossKind::GaussianNll, 1e-3, Want::NONE).unwrap();
            let slow = propagate(&model, ds.image(i), key).unwrap().prediction();
            let dm = (&fast.prediction.mean - &slow.mean)
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            let dc = (&fast.prediction.cov - &slow.cov)
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            let scale = slow.cov.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(dm < 1e-10, "{act}: mean gap {dm}");
            assert!(dc < 1e-8 * scale.max(1e-12), "{act}: cov gap {dc} vs {scale}");
        }
    }
}

#[test]
fn endp_gradients_match_finite_differences() {
    let ds = toy_data(4, 2);
    let batch: Vec<usize> = (0..4).collect();
    for dense in [CovarianceKind::Full, CovarianceKind::Diagonal] {
        let model = Model::init(toy_spec(Activation::Elu, true, dense, 50), 3).unwrap();
        let report = check_gradients(&model, &ds, &batch, &settings(LossKind::GaussianNll), 11, 1e-2).unwrap();
        assert!(report.passed, "{dense:?}: {report:?}");
        let ce = check_gradients(&model, &ds, &batch, &settings(LossKind::CrossEntropy), 12, 1e-2).unwrap();
        assert!(ce.passed, "{ce:?}");
    }
}

#[test]
fn deterministic_gradients_are_tight() {
    let ds = toy_data(4, 3);
    let batch: Vec<usize> = (0..4).collect();
    let spec = toy_spec(Activation::Elu, true, CovarianceKind::Full, 2).with_model(ModelKind::Deterministic);
    let model = Model::init(spec, 5).unwrap();
    for loss in [LossKind::CrossEntropy, LossKind::GaussianNll] {
        let report = check_gradients(&model, &ds, &batch, &settings(loss), 1, 1e-5).unwrap();
        assert!(report.passed, "{loss:?}: {report:?}");
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let ds = toy_data(1, 4);
    for kind in [ModelKind::Endp, ModelKind::Deterministic] {
        let model = Model::init(
            toy_spec(Activation::Elu, true, CovarianceKind::Diagonal, 30).with_model(kind),
            9,
        )
        .unwrap();
        let loss = LossKind::default_for(kind);
        let key = NoiseKey::new(1, 0, 2, 3);
        let out = forward_backward(&model, ds.image(0), 1, key, loss, 1e-3, Want::INPUT).unwrap();
        let g = out.input_grad.unwrap();
        let mut img = ds.image(0).to_vec();
        for p in 0..img.len() {
            let h = 1e-5;
            let orig = img[p];
            img[p] = orig + h;
            let up = forward_backward(&model, &img, 1, key, loss, 1e-3, Want::NONE)
                .unwrap()
                .loss;
            img[p] = orig - h;
            let down = forward_backward(&model, &img, 1, key, loss, 1e-3, Want::NONE)
                .unwrap()
                .loss;
            img[p] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g[p]).abs() <= 1e-5 * fd.abs().max(g[p].abs()).max(1e-3),
                "{kind:?} pixel {p}: {fd} vs {}",
                g[p]
            );
        }
    }
}

#[test]
fn deep_spec_propagates_and_is_not_trainable() {
    let spec = NetworkSpec {
        input: [1, 10, 10],
        classes: 3,
        model: ModelKind::Endp,
        layers: vec![
            LayerSpec::Conv {
                kernels: 2,
                size: 3,
                stride: 1,
                covariance: CovarianceKind::Full,
            },
            LayerSpec::Activation {
                function: Activation::Elu,
                ensemble: EnsembleSize::Fixed(64),
            },
            LayerSpec::Conv {
                kernels: 2,
                size: 3,
                stride: 1,
                covariance: CovarianceKind::Full,
            },
            LayerSpec::Activation {
                function: Activation::Elu,
                ensemble: EnsembleSize::Fixed(64),
            },
            LayerSpec::Maxpool { patch: 2, stride: 2 },
            LayerSpec::Dense {
                outputs: 3,
                covariance: CovarianceKind::Diagonal,
            },
        ],
    };
    let model = Model::init(spec, 2).unwrap();
    assert!(!model.is_trainable());
    let img = vec![0.5; 100];
    let trace = propagate(&model, &img, eval_key(0, 0)).unwrap();
    assert_eq!(trace.layers[2].len(), 2);
    assert_eq!(trace.layers[2][0].dim(), 36);
    assert_eq!(trace.layers[4][0].dim(), 9);
    assert!((trace.output.mean().sum() - 1.0).abs() < 1e-12);
    let p = model.predict(&img, eval_key(0, 0)).unwrap();
    assert_eq!(p.mean, trace.output.mean().to_owned());
}
