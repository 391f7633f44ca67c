//! Single-channel intensity images and the integral-image box filtering
//! every other operator is built on.

mod integral;
mod io;

pub use integral::{
    box_sum, convolve_box_filter, convolve_box_filter_adjoint, integral, BoxFilterSpec, BoxRect,
    IntegralImage,
};
pub use io::{load_image, save_image};

use crate::error::{Error, Result};

/// Row-major H×W intensity field. Nominal range is `[0, 1]` but any finite
/// value is admitted, since response maps and gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyImage { height, width });
        }
        if data.len() != height * width {
            return Err(Error::BufferLength {
                expected: height * width,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Skips the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_vec_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Lookup with coordinates clamped to the image (edge replication).
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn ensure_same_shape(&self, other: &GrayImage) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Elementwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `a·self + b`, the affine intensity change.
    pub fn affine(&self, gain: f64, offset: f64) -> Result<Self> {
        self.map(|v| gain * v + offset)
    }

    /// `self + step·direction`.
    pub fn add_scaled(&self, step: f64, direction: &GrayImage) -> Result<Self> {
        self.ensure_same_shape(direction)?;
        let data = self
            .data
            .iter()
            .zip(&direction.data)
            .map(|(&a, &d)| a + step * d)
            .collect();
        Self::new(self.height, self.width, data)
    }

    pub fn dot(&self, other: &GrayImage) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            data.extend(self.row(y).iter().rev());
        }
        Self::from_vec_unchecked(self.height, self.width, data)
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for x in 0..self.width {
            for y in 0..self.height {
                data.push(self.get(y, x));
            }
        }
        Self::from_vec_unchecked(self.width, self.height, data)
    }

    /// Copy with `margin` pixels of edge replication on every side.
    pub fn pad_replicate(&self, margin: usize) -> Self {
        let (h, w) = (self.height + 2 * margin, self.width + 2 * margin);
        let m = margin as isize;
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h as isize {
            for x in 0..w as isize {
                data.push(self.get_clamped(y - m, x - m));
            }
        }
        Self::from_vec_unchecked(h, w, data)
    }

    /// Adjoint of [`GrayImage::pad_replicate`]: folds every padded pixel back
    /// onto the source pixel it replicates.
    pub fn fold_replicate(&self, margin: usize) -> Result<Self> {
        if self.height <= 2 * margin || self.width <= 2 * margin {
            return Err(Error::EmptyImage {
                height: self.height.saturating_sub(2 * margin),
                width: self.width.saturating_sub(2 * margin),
            });
        }
        let (h, w) = (self.height - 2 * margin, self.width - 2 * margin);
        let mut data = vec![0.0; h * w];
        let m = margin as isize;
        for py in 0..self.height {
            let y = (py as isize - m).clamp(0, h as isize - 1) as usize;
            for px in 0..self.width {
                let x = (px as isize - m).clamp(0, w as isize - 1) as usize;
                data[y * w + x] += self.data[py * self.width + px];
            }
        }
        Ok(Self::from_vec_unchecked(h, w, data))
    }

    /// Zero image of the padded size with `self` written at offset `margin`.
    pub fn embed(&self, margin: usize) -> Self {
        let w = self.width + 2 * margin;
        let h = self.height + 2 * margin;
        let mut data = vec![0.0; h * w];
        for y in 0..self.height {
            let start = (y + margin) * w + margin;
            data[start..start + self.width].copy_from_slice(self.row(y));
        }
        Self::from_vec_unchecked(h, w, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}
