// SPDX-License-Identifier: Apache-2.0

//! Forward and reverse pass for the single variational stage
//! `conv → activation → [maxpool] → dense → softmax`.
//!
//! The pass computes exactly what chaining the layer operations does, but
//! never forms the large covariances. Each kernel's ensemble is drawn as
//! `W = 1·mᵀ + ε·Lᵀ` (one sampled kernel per row) and pushed through the
//! patches, `Z = W·Xᵀ`, which is a draw from `N(Xm, XΣXᵀ)`. After pooling
//! the covariance is kept as the centred sample block `C` with
//! `Σ_p = CᵀC/(N−1)`, and the dense layer's `m_iᵀΣ_b m_j` terms become
//! `(C·M_kᵀ)ᵀ(C·M_kᵀ)/(N−1)` summed over kernels.
//!
//! With ε held fixed the loss is a deterministic function of the
//! parameters and of the input image, and both gradients are returned.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::params::{group_means_mut, pack_diag_grad, pack_factor_grad, Group, Model};
use super::spec::{CovarianceKind, LayerSpec, ModelKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::gaussian::{audit, GaussianVector};
use crate::layers::im2col::{col2im_add, im2col_flat};
use crate::layers::pool::plan_pool;
use crate::layers::{softmax, softmax_jacobian, Activation, ConvGeometry, CovFactor};
use crate::objective;
use crate::rng::NoiseKey;

/// Per-example likelihood term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Heteroscedastic Gaussian NLL on the softmax output moments.
    GaussianNll,
    /// Cross-entropy of the mean logits.
    CrossEntropy,
}

impl LossKind {
    /// Gaussian NLL for EnDP models, cross-entropy for the baseline.
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Endp => LossKind::GaussianNll,
            ModelKind::Deterministic => LossKind::CrossEntropy,
        }
    }
}

/// Which gradients to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Want {
    pub params: bool,
    pub input: bool,
}

impl Want {
    pub const NONE: Want = Want {
        params: false,
        input: false,
    };
    pub const PARAMS: Want = Want {
        params: true,
        input: false,
    };
    pub const INPUT: Want = Want {
        params: false,
        input: true,
    };
}

/// Softmax output moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl Prediction {
    /// Argmax of the mean; ties go to the lowest class.
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.mean.iter().enumerate() {
            if v > self.mean[best] {
                best = k;
            }
        }
        best
    }

    pub fn variance(&self, class: usize) -> f64 {
        self.cov[[class, class]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutput {
    pub loss: f64,
    pub prediction: Prediction,
    /// Gradient of `loss` with respect to the flat parameters.
    pub param_grad: Option<Vec<f64>>,
    /// Gradient of `loss` with respect to the flattened input image.
    pub input_grad: Option<Vec<f64>>,
}

/// The single-stage architecture extracted from a spec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub geometry: ConvGeometry,
    pub conv_layer: usize,
    pub kernels: usize,
    pub activation: Activation,
    pub ensemble: usize,
    pub pool: Option<(usize, usize)>,
    pub dense_layer: usize,
    pub classes: usize,
}

impl Stage {
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        let sizes = spec.ensemble_sizes()?;
        let unsupported = || {
            Error::Unsupported(
                "the fast pipeline handles conv → activation → [maxpool] → dense; use inference propagation".into(),
            )
        };
        let (kernels, size, stride) = match spec.layers.first() {
            Some(&LayerSpec::Conv {
                kernels, size, stride, ..
            }) => (kernels, size, stride),
            _ => return Err(unsupported()),
        };
        let activation = match spec.layers.get(1) {
            Some(&LayerSpec::Activation { function, .. }) => function,
            _ => return Err(unsupported()),
        };
        let (pool, dense_layer) = match (spec.layers.get(2), spec.layers.len()) {
            (Some(&LayerSpec::Maxpool { patch, stride }), 4) => (Some((patch, stride)), 3),
            (Some(LayerSpec::Dense { .. }), 3) => (None, 2),
            _ => return Err(unsupported()),
        };
        let [c, h, w] = spec.input;
        Ok(Stage {
            geometry: ConvGeometry::new(c, h, w, size, stride)?,
            conv_layer: 0,
            kernels,
            activation,
            ensemble: sizes[0],
            pool,
            dense_layer,
            classes: spec.classes,
        })
    }

    fn kept_positions(&self, map: ArrayView1<'_, f64>) -> Result<Vec<usize>> {
        match self.pool {
            Some((patch, stride)) => Ok(plan_pool(
                map,
                self.geometry.out_height(),
                self.geometry.out_width(),
                patch,
                stride,
            )?
            .kept_indices),
            None => Ok((0..self.geometry.positions()).collect()),
        }
    }

    pub fn pooled_len(&self) -> usize {
        match self.pool {
            Some((p, s)) => ((self.geometry.out_height() - p) / s + 1) * ((self.geometry.out_width() - p) / s + 1),
            None => self.geometry.positions(),
        }
    }
}

/// Noise key of kernel `k` of the conv layer for the example keyed `key`.
pub fn kernel_key(key: NoiseKey, layer: usize, kernel: usize) -> NoiseKey {
    NoiseKey::new(key.seed, layer as u32, key.step, (key.slot << 20) | kernel as u64)
}

struct Head {
    loss: f64,
    prediction: Prediction,
    d_mu_f: Array1<f64>,
    d_sigma_f: Array2<f64>,
}

/// Softmax moments, the loss, and its gradient with respect to `(μ_f, Σ_f)`.
fn head(
    mu_f: ArrayView1<'_, f64>,
    sigma_f: ArrayView2<'_, f64>,
    label: usize,
    loss: LossKind,
    var_floor: f64,
) -> Result<Head> {
    let k = mu_f.len();
    let y = softmax(mu_f);
    let j = softmax_jacobian(y.view());
    let js = j.dot(&sigma_f);
    let cov_y = js.dot(&j);
    match loss {
        LossKind::CrossEntropy => {
            let value = objective::cross_entropy(mu_f, label)?;
            let d_mu_f = objective::cross_entropy_grad(mu_f, label)?;
            Ok(Head {
                loss: value,
                prediction: Prediction { mean: y, cov: cov_y },
                d_mu_f,
                d_sigma_f: Array2::zeros((k, k)),
            })
        }
        LossKind::GaussianNll => {
            let v = cov_y.diag().to_owned();
            let value = objective::nll_from_parts(y.view(), v.view(), label, var_floor)?;
            let (mut dy, dv) = objective::nll_grad(y.view(), v.view(), label, var_floor)?;
            // Σ_y = J Σ_f J with J symmetric
            let dvj = Array2::from_shape_fn((k, k), |(a, b)| dv[a] * j[[a, b]]);
            let d_sigma_f = j.dot(&dvj);
            let d_j = Array2::from_shape_fn((k, k), |(a, b)| 2.0 * dv[a] * js[[a, b]]);
            let row = d_j.dot(&y);
            let col = d_j.t().dot(&y);
            for m in 0..k {
                dy[m] += d_j[[m, m]] - row[m] - col[m];
            }
            let d_mu_f = j.dot(&dy);
            Ok(Head {
                loss: value,
                prediction: Prediction { mean: y, cov: cov_y },
                d_mu_f,
                d_sigma_f,
            })
        }
    }
}

/// Everything the reverse pass needs from one kernel.
struct KernelTape {
    eps: Array2<f64>,
    weights: Array2<f64>,
    kept: Vec<usize>,
    /// Pre-activations at kept positions, `N × pooled`.
    z_kept: Array2<f64>,
    /// Centred post-activation samples at kept positions.
    centred: Array2<f64>,
    mu_p: Array1<f64>,
}

/// Loss, prediction and requested gradients for one example.
///
/// `key` addresses the ensemble noise; its `slot` should identify the
/// example so different images draw different ε.
pub fn forward_backward(
    model: &Model,
    image: &[f64],
    label: usize,
    key: NoiseKey,
    loss: LossKind,
    var_floor: f64,
    want: Want,
) -> Result<ExampleOutput> {
    let stage = Stage::from_spec(model.spec())?;
    if image.len() != stage.geometry.input_len() {
        return Err(Error::DimensionMismatch(format!(
            "image has {} values, network expects {}",
            image.len(),
            stage.geometry.input_len()
        )));
    }
    if label >= stage.classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: stage.classes,
        });
    }
    match model.kind() {
        ModelKind::Endp => endp_pass(model, &stage, image, label, key, loss, var_floor, want),
        ModelKind::Deterministic => point_pass(model, &stage, image, label, loss, var_floor, want),
    }
}

fn groups(model: &Model, stage: &Stage) -> (Group, Group) {
    let layout = model.layout();
    (
        *layout.group_for_layer(stage.conv_layer).expect("conv group"),
        *layout.group_for_layer(stage.dense_layer).expect("dense group"),
    )
}

#[allow(clippy::too_many_arguments)]
fn endp_pass(
    model: &Model,
    stage: &Stage,
    image: &[f64],
    label: usize,
    key: NoiseKey,
    loss: LossKind,
    var_floor: f64,
    want: Want,
) -> Result<ExampleOutput> {
    let (cg, dg) = groups(model, stage);
    let n = stage.ensemble;
    let nm1 = (n - 1) as f64;
    let act = stage.activation;
    let patches = im2col_flat(image, stage.geometry);
    let x = &patches.x;
    let pooled = stage.pooled_len();
    let auditing = audit::is_enabled();

    let mut tapes = Vec::with_capacity(stage.kernels);
    for k in 0..stage.kernels {
        let m = model.vector_mean(&cg, k);
        let eps = kernel_key(key, stage.conv_layer, k).normal_matrix(n, cg.width);
        let mut weights = match model.factor(&cg, k) {
            CovFactor::Full(l) => eps.dot(&l.t()),
            CovFactor::Diagonal(sd) => &eps * &sd,
        };
        weights += &m;
        let z = weights.dot(&x.t());
        let a = z.mapv(|v| act.apply(v));
        let mu_g = a.mean_axis(Axis(0)).expect("n >= 2");
        let kept = stage.kept_positions(mu_g.view())?;
        let mu_p: Array1<f64> = kept.iter().map(|&i| mu_g[i]).collect();
        let mut centred = a.select(Axis(1), &kept);
        centred -= &mu_p;
        if auditing {
            GaussianVector::new(mu_p.clone(), centred.t().dot(&centred) / nm1)?;
        }
        tapes.push(KernelTape {
            eps,
            weights,
            z_kept: z.select(Axis(1), &kept),
            kept,
            centred,
            mu_p,
        });
    }

    let means = model.group_means(&dg);
    let h = dg.count;
    let mut mu_b = Array1::zeros(dg.width);
    let mut var_b = Array1::zeros(dg.width);
    for (k, t) in tapes.iter().enumerate() {
        mu_b.slice_mut(s![k * pooled..(k + 1) * pooled]).assign(&t.mu_p);
        let v = t.centred.map_axis(Axis(0), |c| c.dot(&c) / nm1);
        var_b.slice_mut(s![k * pooled..(k + 1) * pooled]).assign(&v);
    }
    let block = |k: usize| s![.., k * pooled..(k + 1) * pooled];
    let mu_f = means.dot(&mu_b);
    let mut sigma_f = Array2::<f64>::zeros((h, h));
    let mut qs = Vec::with_capacity(stage.kernels);
    for (k, t) in tapes.iter().enumerate() {
        let q = t.centred.dot(&means.slice(block(k)).t());
        sigma_f += &(q.t().dot(&q) / nm1);
        qs.push(q);
    }
    let factors: Vec<CovFactor> = (0..h).map(|o| model.factor(&dg, o)).collect();
    let pre_b: Vec<Option<Vec<Array2<f64>>>> = factors
        .iter()
        .map(|f| match f {
            CovFactor::Full(l) => Some(
                tapes
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t.centred.dot(&l.slice(s![k * pooled..(k + 1) * pooled, ..])))
                    .collect(),
            ),
            CovFactor::Diagonal(_) => None,
        })
        .collect();
    for (o, f) in factors.iter().enumerate() {
        // tr(Σ_o Σ_b) + μ_bᵀ Σ_o μ_b
        let extra = match (f, &pre_b[o]) {
            (CovFactor::Diagonal(sd), _) => sd
                .iter()
                .zip(var_b.iter().zip(mu_b.iter()))
                .map(|(s, (v, mu))| s * s * (v + mu * mu))
                .sum::<f64>(),
            (CovFactor::Full(l), Some(bs)) => {
                let u = l.t().dot(&mu_b);
                bs.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / nm1 + u.dot(&u)
            }
            _ => unreachable!(),
        };
        sigma_f[[o, o]] += extra;
    }
    if auditing {
        GaussianVector::new(mu_f.clone(), sigma_f.clone())?;
    }
    let out = head(mu_f.view(), sigma_f.view(), label, loss, var_floor)?;
    if auditing {
        GaussianVector::new(out.prediction.mean.clone(), out.prediction.cov.clone())?;
    }
    if !want.params && !want.input {
        return Ok(ExampleOutput {
            loss: out.loss,
            prediction: out.prediction,
            param_grad: None,
            input_grad: None,
        });
    }

    // reverse pass
    let ds = &out.d_sigma_f;
    let d_mu_f = &out.d_mu_f;
    let mut grad = want.params.then(|| vec![0.0; model.num_params()]);
    let mut d_means = Array2::<f64>::zeros((h, dg.width));
    for o in 0..h {
        d_means.row_mut(o).scaled_add(d_mu_f[o], &mu_b);
    }
    let mut d_mu_b = means.t().dot(d_mu_f);
    let mut d_var_b = Array1::<f64>::zeros(dg.width);
    let mut d_centred: Vec<Array2<f64>> = tapes.iter().map(|t| Array2::zeros(t.centred.raw_dim())).collect();
    let raw_params = model.params();
    for (o, f) in factors.iter().enumerate() {
        let c = ds[[o, o]];
        let range = dg.factor_range(o).expect("endp factors");
        match f {
            CovFactor::Diagonal(sd) => {
                let mut d_sd = Array1::zeros(dg.width);
                for d in 0..dg.width {
                    let s2 = sd[d] * sd[d];
                    d_sd[d] = 2.0 * sd[d] * c * (var_b[d] + mu_b[d] * mu_b[d]);
                    d_var_b[d] += c * s2;
                    d_mu_b[d] += 2.0 * c * s2 * mu_b[d];
                }
                if let Some(g) = grad.as_mut() {
                    pack_diag_grad(
                        d_sd.view(),
                        &raw_params[range.clone()],
                        ndarray::ArrayViewMut1::from(&mut g[range]),
                    );
                }
            }
            CovFactor::Full(l) => {
                let bs = pre_b[o].as_ref().expect("full factor tape");
                let mut d_l = Array2::<f64>::zeros(l.raw_dim());
                for (k, (t, b)) in tapes.iter().zip(bs).enumerate() {
                    let db = b * (2.0 * c / nm1);
                    let rows = s![k * pooled..(k + 1) * pooled, ..];
                    d_centred[k] += &db.dot(&l.slice(rows).t());
                    let mut dl_rows = d_l.slice_mut(rows);
                    dl_rows += &t.centred.t().dot(&db);
                }
                let u = l.t().dot(&mu_b);
                let du = &u * (2.0 * c);
                for i in 0..dg.width {
                    d_l.row_mut(i).scaled_add(mu_b[i], &du);
                }
                d_mu_b += &l.dot(&du);
                if let Some(g) = grad.as_mut() {
                    pack_factor_grad(d_l.view(), &raw_params[range.clone()], &mut g[range]);
                }
            }
        }
    }

    let mut d_image = want.input.then(|| vec![0.0; image.len()]);
    let kept_rows: Vec<Array2<f64>> = tapes.iter().map(|t| x.select(Axis(0), &t.kept)).collect();
    let mut d_conv_means = Array2::<f64>::zeros((cg.count, cg.width));
    for (k, t) in tapes.iter().enumerate() {
        let dq = qs[k].dot(ds) * (2.0 / nm1);
        let mk = means.slice(block(k));
        let mut dc = std::mem::take(&mut d_centred[k]);
        dc += &dq.dot(&mk);
        let mut dmk = d_means.slice_mut(block(k));
        dmk += &dq.t().dot(&t.centred);
        let dv = d_var_b.slice(s![k * pooled..(k + 1) * pooled]);
        Zip::from(&mut dc)
            .and(&t.centred)
            .and_broadcast(&dv)
            .for_each(|d, &cv, &v| *d += 2.0 * cv * v / nm1);
        // C = G − 1·colmean(G)
        let col = dc.mean_axis(Axis(0)).expect("n >= 2");
        let d_mu_p = d_mu_b.slice(s![k * pooled..(k + 1) * pooled]);
        let shift = &d_mu_p / n as f64 - &col;
        let mut dz = dc;
        dz += &shift;
        Zip::from(&mut dz)
            .and(&t.z_kept)
            .for_each(|d, &z| *d *= act.derivative(z));
        if want.params {
            let dw = dz.dot(&kept_rows[k]);
            d_conv_means.row_mut(k).assign(&dw.sum_axis(Axis(0)));
            if let Some(g) = grad.as_mut() {
                let range = cg.factor_range(k).expect("endp factors");
                let kind = cg.factor.expect("endp factors").kind;
                let d_l = dw.t().dot(&t.eps);
                match kind {
                    CovarianceKind::Full => pack_factor_grad(d_l.view(), &raw_params[range.clone()], &mut g[range]),
                    CovarianceKind::Diagonal => pack_diag_grad(
                        d_l.diag(),
                        &raw_params[range.clone()],
                        ndarray::ArrayViewMut1::from(&mut g[range]),
                    ),
                }
            }
        }
        if let Some(di) = d_image.as_mut() {
            let dx = dz.t().dot(&t.weights);
            col2im_add(dx.view(), &t.kept, stage.geometry, di);
        }
    }
    if let Some(g) = grad.as_mut() {
        group_means_mut(&cg, g).assign(&d_conv_means);
        group_means_mut(&dg, g).assign(&d_means);
    }
    Ok(ExampleOutput {
        loss: out.loss,
        prediction: out.prediction,
        param_grad: grad,
        input_grad: d_image,
    })
}

fn point_pass(
    model: &Model,
    stage: &Stage,
    image: &[f64],
    label: usize,
    loss: LossKind,
    var_floor: f64,
    want: Want,
) -> Result<ExampleOutput> {
    let (cg, dg) = groups(model, stage);
    let act = stage.activation;
    let patches = im2col_flat(image, stage.geometry);
    let x = &patches.x;
    let pooled = stage.pooled_len();
    let kernel_means = model.group_means(&cg);
    // positions × kernels
    let z = x.dot(&kernel_means.t());
    let mut b = Array1::zeros(dg.width);
    let mut kept_all = Vec::with_capacity(stage.kernels);
    for k in 0..stage.kernels {
        let a = z.column(k).mapv(|v| act.apply(v));
        let kept = stage.kept_positions(a.view())?;
        for (i, &p) in kept.iter().enumerate() {
            b[k * pooled + i] = a[p];
        }
        kept_all.push(kept);
    }
    let means = model.group_means(&dg);
    let f = means.dot(&b);
    let h = dg.count;
    let out = head(f.view(), Array2::zeros((h, h)).view(), label, loss, var_floor)?;
    if !want.params && !want.input {
        return Ok(ExampleOutput {
            loss: out.loss,
            prediction: out.prediction,
            param_grad: None,
            input_grad: None,
        });
    }
    let df = &out.d_mu_f;
    let db = means.t().dot(df);
    let mut grad = want.params.then(|| vec![0.0; model.num_params()]);
    let mut d_image = want.input.then(|| vec![0.0; image.len()]);
    if let Some(g) = grad.as_mut() {
        let mut dm = group_means_mut(&dg, g);
        for o in 0..h {
            dm.row_mut(o).scaled_add(df[o], &b);
        }
    }
    for (k, kept) in kept_all.iter().enumerate() {
        let dz: Array1<f64> = kept
            .iter()
            .enumerate()
            .map(|(i, &p)| db[k * pooled + i] * act.derivative(z[[p, k]]))
            .collect();
        if let Some(g) = grad.as_mut() {
            let rows = x.select(Axis(0), kept);
            let mut dm = group_means_mut(&cg, g);
            dm.row_mut(k).assign(&rows.t().dot(&dz));
        }
        if let Some(di) = d_image.as_mut() {
            let mk = kernel_means.row(k);
            let dx = Array2::from_shape_fn((kept.len(), cg.width), |(i, e)| dz[i] * mk[e]);
            col2im_add(dx.view(), kept, stage.geometry, di);
        }
    }
    Ok(ExampleOutput {
        loss: out.loss,
        prediction: out.prediction,
        param_grad: grad,
        input_grad: d_image,
    })
}
