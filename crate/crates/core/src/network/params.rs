// SPDX-License-Identifier: Apache-2.0

//! Flat parameter vector and its layout.
//!
//! Every learnable quantity lives in one `Vec<f64>` so the optimizer and
//! the checkpoint code see a single array. Covariance factors are stored
//! unconstrained: the diagonal of each lower-triangular factor is the
//! softplus of its raw entry, off-diagonal entries are used as is.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand_distr::{Distribution, Normal};

use super::spec::{CovarianceKind, LayerSpec, ModelKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::layers::{CovFactor, VariationalConvKernel, VariationalDenseWeight};
use crate::rng::NoiseKey;

/// Initial factor diagonal.
pub const INIT_FACTOR_SCALE: f64 = 0.05;

const INIT_STEP: u64 = u64::MAX - 1;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Number of packed entries of a `d × d` lower triangle.
pub const fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Where one group of `count` weight vectors of width `width` lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Group {
    /// Index into the spec's layer list.
    pub layer: usize,
    pub count: usize,
    pub width: usize,
    pub mean_offset: usize,
    /// `None` for the deterministic model.
    pub factor: Option<FactorBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorBlock {
    pub offset: usize,
    pub kind: CovarianceKind,
}

impl FactorBlock {
    pub fn per_vector(&self, width: usize) -> usize {
        match self.kind {
            CovarianceKind::Full => packed_len(width),
            CovarianceKind::Diagonal => width,
        }
    }
}

impl Group {
    pub fn mean_len(&self) -> usize {
        self.count * self.width
    }

    pub fn factor_range(&self, v: usize) -> Option<std::ops::Range<usize>> {
        self.factor.map(|f| {
            let n = f.per_vector(self.width);
            f.offset + v * n..f.offset + (v + 1) * n
        })
    }
}

/// Parameter layout: one [`Group`] per conv or dense layer, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub groups: Vec<Group>,
    pub len: usize,
}

impl Layout {
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut prev = spec.input_shape();
        let mut groups = Vec::new();
        let mut at = 0;
        for (i, (layer, shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            let (count, width, kind) = match *layer {
                LayerSpec::Conv {
                    kernels,
                    size,
                    covariance,
                    ..
                } => (kernels, prev.channels * size * size, covariance),
                LayerSpec::Dense { outputs, covariance } => (outputs, prev.len(), covariance),
                _ => {
                    prev = *shape;
                    continue;
                }
            };
            let mean_offset = at;
            at += count * width;
            let factor = match spec.model {
                ModelKind::Deterministic => None,
                ModelKind::Endp => {
                    let block = FactorBlock { offset: at, kind };
                    at += count * block.per_vector(width);
                    Some(block)
                }
            };
            groups.push(Group {
                layer: i,
                count,
                width,
                mean_offset,
                factor,
            });
            prev = *shape;
        }
        Ok(Layout { groups, len: at })
    }

    pub fn group_for_layer(&self, layer: usize) -> Option<&Group> {
        self.groups.iter().find(|g| g.layer == layer)
    }
}

/// A network: its spec plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    layout: Layout,
    params: Vec<f64>,
}

impl Model {
    /// Means from `N(0, 2/fan_in)`, factors `δ·I` with `δ = 0.05`.
    ///
    /// Means are drawn from the same streams for both model kinds, so an
    /// EnDP model and its deterministic baseline start from identical means.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let layout = Layout::new(&spec)?;
        let mut params = vec![0.0; layout.len];
        let diag = softplus_inverse(INIT_FACTOR_SCALE);
        for g in &layout.groups {
            let normal = Normal::new(0.0, (2.0 / g.width as f64).sqrt()).expect("positive std");
            let key = NoiseKey::new(seed, g.layer as u32, INIT_STEP, 0);
            for v in 0..g.count {
                let mut rng = key.stream(v as u64);
                let start = g.mean_offset + v * g.width;
                for p in &mut params[start..start + g.width] {
                    *p = normal.sample(&mut rng);
                }
                if let (Some(range), Some(block)) = (g.factor_range(v), g.factor) {
                    let raw = &mut params[range];
                    match block.kind {
                        CovarianceKind::Full => {
                            for i in 0..g.width {
                                raw[packed_index(i, i)] = diag;
                            }
                        }
                        CovarianceKind::Diagonal => raw.fill(diag),
                    }
                }
            }
        }
        Ok(Model { spec, layout, params })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&spec)?;
        if params.len() != layout.len {
            return Err(Error::DimensionMismatch(format!(
                "spec needs {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Model { spec, layout, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.model
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    /// Replaces the ensemble size of every activation layer.
    pub fn set_ensemble(&mut self, sizes: &[usize]) -> Result<()> {
        let slots = self
            .spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Activation { .. }))
            .count();
        if sizes.len() != slots && sizes.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "{} ensemble sizes given for {slots} activation layers",
                sizes.len()
            )));
        }
        let mut it = sizes.iter().cycle();
        let mut spec = self.spec.clone();
        for layer in &mut spec.layers {
            if let LayerSpec::Activation { ensemble, .. } = layer {
                *ensemble = super::spec::EnsembleSize::Fixed(*it.next().expect("non-empty"));
            }
        }
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    pub fn group_means(&self, g: &Group) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (g.count, g.width),
            &self.params[g.mean_offset..g.mean_offset + g.mean_len()],
        )
        .expect("layout sized")
    }

    pub fn vector_mean(&self, g: &Group, v: usize) -> ArrayView1<'_, f64> {
        let start = g.mean_offset + v * g.width;
        ArrayView1::from(&self.params[start..start + g.width])
    }

    /// Materialized factor of weight vector `v` of group `g` (zeros for the
    /// deterministic model).
    pub fn factor(&self, g: &Group, v: usize) -> CovFactor {
        match (g.factor, g.factor_range(v)) {
            (Some(block), Some(range)) => unpack_factor(&self.params[range], g.width, block.kind),
            _ => CovFactor::Diagonal(Array1::zeros(g.width)),
        }
    }

    pub fn conv_kernels(&self, layer: usize) -> Result<Vec<VariationalConvKernel>> {
        let g = self
            .layout
            .group_for_layer(layer)
            .ok_or_else(|| Error::InvalidSpec(format!("layer {layer} has no parameters")))?;
        (0..g.count)
            .map(|v| VariationalConvKernel::new(self.vector_mean(g, v).to_owned(), self.factor(g, v)))
            .collect()
    }

    pub fn dense_weight(&self, layer: usize) -> Result<VariationalDenseWeight> {
        let g = self
            .layout
            .group_for_layer(layer)
            .ok_or_else(|| Error::InvalidSpec(format!("layer {layer} has no parameters")))?;
        VariationalDenseWeight::new(
            self.group_means(g).to_owned(),
            (0..g.count).map(|v| self.factor(g, v)).collect(),
        )
    }

    /// Sum of KL terms of every weight vector against `N(0, prior_var·I)`.
    /// Zero for the deterministic model.
    pub fn kl(&self, prior_var: f64) -> Result<f64> {
        if !(prior_var > 0.0) {
            return Err(Error::NonPositivePriorVariance(prior_var));
        }
        let mut total = 0.0;
        for g in &self.layout.groups {
            if g.factor.is_none() {
                continue;
            }
            for v in 0..g.count {
                total += crate::objective::kl_factor(self.vector_mean(g, v), &self.factor(g, v), prior_var)?;
            }
        }
        Ok(total)
    }

    /// Adds `scale · ∂KL/∂θ` to `grad`.
    pub fn kl_grad(&self, prior_var: f64, scale: f64, grad: &mut [f64]) {
        for g in &self.layout.groups {
            let Some(block) = g.factor else { continue };
            let means = g.mean_offset..g.mean_offset + g.mean_len();
            for (d, &m) in grad[means.clone()].iter_mut().zip(&self.params[means]) {
                *d += scale * m / prior_var;
            }
            for v in 0..g.count {
                let range = g.factor_range(v).expect("factor present");
                let raw = &self.params[range.clone()];
                let out = &mut grad[range];
                match block.kind {
                    CovarianceKind::Full => {
                        for i in 0..g.width {
                            for j in 0..i {
                                let k = packed_index(i, j);
                                out[k] += scale * raw[k] / prior_var;
                            }
                            let k = packed_index(i, i);
                            let l = softplus(raw[k]);
                            out[k] += scale * (l / prior_var - 1.0 / l) * sigmoid(raw[k]);
                        }
                    }
                    CovarianceKind::Diagonal => {
                        for (o, &r) in out.iter_mut().zip(raw) {
                            let l = softplus(r);
                            *o += scale * (l / prior_var - 1.0 / l) * sigmoid(r);
                        }
                    }
                }
            }
        }
    }
}

/// Raw packed entries to a factor.
pub fn unpack_factor(raw: &[f64], width: usize, kind: CovarianceKind) -> CovFactor {
    match kind {
        CovarianceKind::Full => {
            let mut l = Array2::zeros((width, width));
            for i in 0..width {
                for j in 0..i {
                    l[[i, j]] = raw[packed_index(i, j)];
                }
                l[[i, i]] = softplus(raw[packed_index(i, i)]);
            }
            CovFactor::Full(l)
        }
        CovarianceKind::Diagonal => CovFactor::Diagonal(raw.iter().map(|&r| softplus(r)).collect()),
    }
}

/// Chains a gradient with respect to the lower factor (only the lower
/// triangle is read) back to the raw packed entries, adding into `out`.
pub fn pack_factor_grad(d_lower: ArrayView2<'_, f64>, raw: &[f64], out: &mut [f64]) {
    let width = d_lower.nrows();
    for i in 0..width {
        for j in 0..i {
            out[packed_index(i, j)] += d_lower[[i, j]];
        }
        let k = packed_index(i, i);
        out[k] += d_lower[[i, i]] * sigmoid(raw[k]);
    }
}

/// Diagonal-factor counterpart of [`pack_factor_grad`].
pub fn pack_diag_grad(d_sd: ArrayView1<'_, f64>, raw: &[f64], mut out: ArrayViewMut1<'_, f64>) {
    for ((o, &g), &r) in out.iter_mut().zip(d_sd.iter()).zip(raw) {
        *o += g * sigmoid(r);
    }
}

/// Mutable view of a group's means inside a gradient vector.
pub fn group_means_mut<'a>(g: &Group, grad: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape(
        (g.count, g.width),
        &mut grad[g.mean_offset..g.mean_offset + g.mean_len()],
    )
    .expect("layout sized")
}
