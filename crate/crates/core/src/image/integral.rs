use rayon::prelude::*;

use super::GrayImage;
use crate::error::{Error, Result};

/// Inclusive summed-area table: entry `(y, x)` holds the sum of all source
/// pixels with row ≤ y and column ≤ x.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl IntegralImage {
    pub fn new(img: &GrayImage) -> Self {
        Self::from_values(img.height(), img.width(), img.as_slice())
    }

    pub(crate) fn from_values(height: usize, width: usize, values: &[f64]) -> Self {
        let mut data = vec![0.0; height * width];
        for y in 0..height {
            let mut row_sum = 0.0;
            for x in 0..width {
                row_sum += values[y * width + x];
                let above = if y > 0 {
                    data[(y - 1) * width + x]
                } else {
                    0.0
                };
                data[y * width + x] = row_sum + above;
            }
        }
        Self {
            height,
            width,
            data,
        }
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
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Inclusive-table lookup where index −1 on either axis reads as zero.
    #[inline]
    fn at(&self, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    /// Sum over the `h×w` rectangle with top-left `(row, col)`, truncated to
    /// the image. Rectangles entirely outside sum to zero.
    #[inline]
    pub fn box_sum(&self, row: isize, col: isize, h: usize, w: usize) -> f64 {
        let r0 = row.max(0);
        let c0 = col.max(0);
        let r1 = (row + h as isize - 1).min(self.height as isize - 1);
        let c1 = (col + w as isize - 1).min(self.width as isize - 1);
        if r0 > r1 || c0 > c1 {
            return 0.0;
        }
        self.at(r1, c1) - self.at(r0 - 1, c1) - self.at(r1, c0 - 1) + self.at(r0 - 1, c0 - 1)
    }
}

pub fn integral(img: &GrayImage) -> IntegralImage {
    IntegralImage::new(img)
}

pub fn box_sum(ii: &IntegralImage, row: isize, col: isize, h: usize, w: usize) -> f64 {
    ii.box_sum(row, col, h, w)
}

/// One weighted rectangle of a box filter; offsets place its top-left corner
/// relative to the pixel being filtered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRect {
    pub row_offset: isize,
    pub col_offset: isize,
    pub height: usize,
    pub width: usize,
    pub weight: f64,
}

impl BoxRect {
    pub fn new(
        row_offset: isize,
        col_offset: isize,
        height: usize,
        width: usize,
        weight: f64,
    ) -> Self {
        Self {
            row_offset,
            col_offset,
            height,
            width,
            weight,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxFilterSpec {
    rects: Vec<BoxRect>,
}

impl BoxFilterSpec {
    pub fn new(rects: Vec<BoxRect>) -> Result<Self> {
        if rects.is_empty() {
            return Err(Error::InvalidFilter("no rectangles"));
        }
        if rects.iter().any(|r| r.height == 0 || r.width == 0) {
            return Err(Error::InvalidFilter("rectangle with zero extent"));
        }
        Ok(Self { rects })
    }

    pub fn rects(&self) -> &[BoxRect] {
        &self.rects
    }

    /// Σ weight × area; zero for derivative filters.
    pub fn dc_gain(&self) -> f64 {
        self.rects.iter().map(|r| r.weight * r.area() as f64).sum()
    }

    /// Point-reflected filter. Convolving a cotangent field with it is the
    /// adjoint of convolving with `self` under truncated-box borders.
    pub fn flipped(&self) -> Self {
        let rects = self
            .rects
            .iter()
            .map(|r| BoxRect {
                row_offset: -(r.row_offset + r.height as isize - 1),
                col_offset: -(r.col_offset + r.width as isize - 1),
                ..*r
            })
            .collect();
        Self { rects }
    }

    pub fn transposed(&self) -> Self {
        let rects = self
            .rects
            .iter()
            .map(|r| BoxRect {
                row_offset: r.col_offset,
                col_offset: r.row_offset,
                height: r.width,
                width: r.height,
                weight: r.weight,
            })
            .collect();
        Self { rects }
    }

    /// Dense stencil `(top, left, weights)` equivalent to this filter away
    /// from borders.
    pub fn dense_stencil(&self) -> (isize, isize, Vec<Vec<f64>>) {
        let top = self.rects.iter().map(|r| r.row_offset).min().unwrap();
        let left = self.rects.iter().map(|r| r.col_offset).min().unwrap();
        let bottom = self
            .rects
            .iter()
            .map(|r| r.row_offset + r.height as isize)
            .max()
            .unwrap();
        let right = self
            .rects
            .iter()
            .map(|r| r.col_offset + r.width as isize)
            .max()
            .unwrap();
        let mut stencil = vec![vec![0.0; (right - left) as usize]; (bottom - top) as usize];
        for r in &self.rects {
            for dy in 0..r.height {
                for dx in 0..r.width {
                    let y = (r.row_offset - top) as usize + dy;
                    let x = (r.col_offset - left) as usize + dx;
                    stencil[y][x] += r.weight;
                }
            }
        }
        (top, left, stencil)
    }

    /// Filter response at one pixel; rectangle order fixes summation order.
    #[inline]
    pub fn apply_at(&self, ii: &IntegralImage, y: isize, x: isize) -> f64 {
        self.rects
            .iter()
            .map(|r| r.weight * ii.box_sum(y + r.row_offset, x + r.col_offset, r.height, r.width))
            .sum()
    }
}

/// Filters the source of `ii` with `spec`, producing a map of the same size.
pub fn convolve_box_filter(ii: &IntegralImage, spec: &BoxFilterSpec) -> GrayImage {
    let (h, w) = (ii.height(), ii.width());
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, v) in row.iter_mut().enumerate() {
            *v = spec.apply_at(ii, y as isize, x as isize);
        }
    });
    GrayImage::from_vec_unchecked(h, w, out)
}

/// Transpose of [`convolve_box_filter`] applied to a cotangent map.
pub fn convolve_box_filter_adjoint(seed: &GrayImage, spec: &BoxFilterSpec) -> GrayImage {
    convolve_box_filter(&IntegralImage::new(seed), &spec.flipped())
}
