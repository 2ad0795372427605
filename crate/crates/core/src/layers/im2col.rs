// SPDX-License-Identifier: Apache-2.0

//! Patch extraction: valid (unpadded) cross-correlation as a matrix product.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Shape of a valid convolution over a `channels × height × width` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize) -> Result<Self> {
        if channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::GeometryMismatch(
                "channels, kernel size and stride must be positive".into(),
            ));
        }
        if height < kernel || width < kernel {
            return Err(Error::GeometryMismatch(format!(
                "kernel {kernel} does not fit a {height}x{width} input"
            )));
        }
        if !(height - kernel).is_multiple_of(stride) || !(width - kernel).is_multiple_of(stride) {
            return Err(Error::GeometryMismatch(format!(
                "({height}-{kernel}) and ({width}-{kernel}) must be divisible by stride {stride}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    /// Number of output positions (`d₁²` for square inputs).
    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Length of one vectorized patch, `c_in·k²`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Flat input index of patch entry `entry` at output position `pos`.
    ///
    /// Patch entries are ordered channel-major, then kernel row, then kernel
    /// column; inputs are flattened `c, y, x`.
    #[inline]
    pub fn input_index(&self, pos: usize, entry: usize) -> usize {
        let (oy, ox) = (pos / self.out_width(), pos % self.out_width());
        let kk = self.kernel * self.kernel;
        let (c, r) = (entry / kk, entry % kk);
        let (ky, kx) = (r / self.kernel, r % self.kernel);
        let y = oy * self.stride + ky;
        let x = ox * self.stride + kx;
        (c * self.height + y) * self.width + x
    }
}

/// Rows are vectorized receptive fields, one per output position.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub x: Array2<f64>,
    pub geometry: ConvGeometry,
}

impl PatchMatrix {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }
}

pub fn im2col(image: ArrayView3<'_, f64>, kernel: usize, stride: usize) -> Result<PatchMatrix> {
    let (c, h, w) = image.dim();
    let geometry = ConvGeometry::new(c, h, w, kernel, stride)?;
    let flat: Vec<f64> = image.iter().copied().collect();
    Ok(im2col_flat(&flat, geometry))
}

/// `im2col` over an already flattened `c, y, x` input.
pub fn im2col_flat(input: &[f64], geometry: ConvGeometry) -> PatchMatrix {
    debug_assert_eq!(input.len(), geometry.input_len());
    let (rows, cols) = (geometry.positions(), geometry.patch_len());
    let mut x = Array2::zeros((rows, cols));
    for (pos, mut row) in x.rows_mut().into_iter().enumerate() {
        for (entry, v) in row.iter_mut().enumerate() {
            *v = input[geometry.input_index(pos, entry)];
        }
    }
    PatchMatrix { x, geometry }
}

/// Adjoint of patch extraction restricted to `positions`: scatters the rows
/// of `grad` (one per listed position) back into an input-shaped gradient.
pub fn col2im_add(grad: ArrayView2<'_, f64>, positions: &[usize], geometry: ConvGeometry, out: &mut [f64]) {
    debug_assert_eq!(grad.nrows(), positions.len());
    for (row, &pos) in grad.rows().into_iter().zip(positions) {
        for (entry, g) in row.iter().enumerate() {
            out[geometry.input_index(pos, entry)] += g;
        }
    }
}

pub fn unflatten(input: &[f64], c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_vec((c, h, w), input.to_vec()).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array3};

    #[test]
    fn one_by_one_kernel_is_identity_arrangement() {
        let img = Array3::from_shape_fn((1, 3, 2), |(_, y, x)| (y * 2 + x) as f64);
        let p = im2col(img.view(), 1, 1).unwrap();
        assert_eq!(p.x.shape(), &[6, 1]);
        let w = array![2.5];
        let out = p.x.dot(&w);
        let expected: Array1<f64> = img.iter().map(|v| 2.5 * v).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn three_by_three_with_two_by_two_kernel() {
        let img = Array3::from_shape_fn((1, 3, 3), |(_, y, x)| (y * 3 + x + 1) as f64);
        let p = im2col(img.view(), 2, 1).unwrap();
        let expected = array![
            [1.0, 2.0, 4.0, 5.0],
            [2.0, 3.0, 5.0, 6.0],
            [4.0, 5.0, 7.0, 8.0],
            [5.0, 6.0, 8.0, 9.0]
        ];
        assert_eq!(p.x, expected);
    }

    #[test]
    fn rejects_indivisible_stride() {
        let img = Array3::<f64>::zeros((1, 6, 6));
        assert!(matches!(im2col(img.view(), 3, 2), Err(Error::GeometryMismatch(_))));
        assert!(matches!(im2col(img.view(), 7, 1), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(2, 5, 4, 2, 1).unwrap();
        let input: Vec<f64> = (0..g.input_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = im2col_flat(&input, g);
        let r = Array2::from_shape_fn(p.x.dim(), |(i, j)| ((i * 7 + j) as f64).cos());
        let lhs = (&p.x * &r).sum();
        let mut back = vec![0.0; g.input_len()];
        let all: Vec<usize> = (0..g.positions()).collect();
        col2im_add(r.view(), &all, g, &mut back);
        let rhs: f64 = back.iter().zip(&input).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
