//! Determinant-of-Hessian response maps from box-filter approximations of
//! the Gaussian second derivatives, and sparse keypoints by scale-space
//! non-maximum suppression.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{convolve_box_filter, BoxFilterSpec, BoxRect, GrayImage, IntegralImage};

/// Weight of the `Lxy²` term in the determinant approximation.
pub const CROSS_TERM_WEIGHT: f64 = 0.81;

/// Single-octave ladder used when no scales are configured.
pub const DEFAULT_FILTER_SIZES: [usize; 5] = [9, 15, 21, 27, 33];

/// A detector/descriptor scale, keyed by the box filter side `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    filter_size: usize,
    sigma: f64,
    step: usize,
}

impl ScaleSpec {
    pub fn new(filter_size: usize) -> Result<Self> {
        if filter_size < 9 || filter_size.is_multiple_of(2) || !filter_size.is_multiple_of(3) {
            return Err(Error::InvalidFilterSize(filter_size));
        }
        let sigma = 1.2 * filter_size as f64 / 9.0;
        let step = (sigma.round() as usize).max(1);
        Ok(Self {
            filter_size,
            sigma,
            step,
        })
    }

    pub fn filter_size(&self) -> usize {
        self.filter_size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Descriptor sampling step `s = round(σ)`.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Lobe width `L/3`.
    pub fn lobe(&self) -> usize {
        self.filter_size / 3
    }

    /// Half-width of the filter footprint.
    pub fn radius(&self) -> usize {
        (self.filter_size - 1) / 2
    }
}

pub fn default_scales() -> Vec<ScaleSpec> {
    scales_from_sizes(&DEFAULT_FILTER_SIZES).expect("default ladder is valid")
}

pub fn scales_from_sizes(sizes: &[usize]) -> Result<Vec<ScaleSpec>> {
    sizes.iter().map(|&l| ScaleSpec::new(l)).collect()
}

/// Box approximations of ∂²/∂x², ∂²/∂y² and ∂²/∂x∂y at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianFilters {
    pub xx: BoxFilterSpec,
    pub yy: BoxFilterSpec,
    pub xy: BoxFilterSpec,
}

/// Standard SURF layout, every weight divided by `L²`.
///
/// `xx` is three `(2l−1)×l` lobes side by side weighted `+1, −2, +1`; `yy`
/// is its transpose; `xy` is four `l×l` quadrant lobes, positive on the
/// main diagonal, separated from the centre row and column by one pixel.
pub fn hessian_filters(spec: &ScaleSpec) -> HessianFilters {
    let l = spec.lobe() as isize;
    let lu = spec.lobe();
    let half = spec.radius() as isize;
    let norm = 1.0 / (spec.filter_size() * spec.filter_size()) as f64;
    let lobe_h = 2 * lu - 1;

    let xx = BoxFilterSpec::new(vec![
        BoxRect::new(-(l - 1), -half, lobe_h, lu, norm),
        BoxRect::new(-(l - 1), -half + l, lobe_h, lu, -2.0 * norm),
        BoxRect::new(-(l - 1), -half + 2 * l, lobe_h, lu, norm),
    ])
    .expect("non-empty");
    let yy = xx.transposed();
    let xy = BoxFilterSpec::new(vec![
        BoxRect::new(-l, -l, lu, lu, norm),
        BoxRect::new(1, 1, lu, lu, norm),
        BoxRect::new(-l, 1, lu, lu, -norm),
        BoxRect::new(1, -l, lu, lu, -norm),
    ])
    .expect("non-empty");
    HessianFilters { xx, yy, xy }
}

/// `Lxx∘Lyy − 0.81·Lxy∘Lxy`, elementwise.
pub fn hessian_determinant(lxx: &GrayImage, lyy: &GrayImage, lxy: &GrayImage) -> Result<GrayImage> {
    lxx.ensure_same_shape(lyy)?;
    lxx.ensure_same_shape(lxy)?;
    let data = lxx
        .as_slice()
        .iter()
        .zip(lyy.as_slice())
        .zip(lxy.as_slice())
        .map(|((&xx, &yy), &xy)| xx * yy - CROSS_TERM_WEIGHT * xy * xy)
        .collect();
    Ok(GrayImage::from_vec_unchecked(
        lxx.height(),
        lxx.width(),
        data,
    ))
}

/// Filter responses and determinant at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleResponse {
    pub lxx: GrayImage,
    pub lyy: GrayImage,
    pub lxy: GrayImage,
    pub det: GrayImage,
}

impl ScaleResponse {
    pub fn compute(ii: &IntegralImage, spec: &ScaleSpec) -> Self {
        let filters = hessian_filters(spec);
        let lxx = convolve_box_filter(ii, &filters.xx);
        let lyy = convolve_box_filter(ii, &filters.yy);
        let lxy = convolve_box_filter(ii, &filters.xy);
        let det = hessian_determinant(&lxx, &lyy, &lxy).expect("same-shaped filter outputs");
        Self { lxx, lyy, lxy, det }
    }

    /// `sign(Lxx + Lyy)` at a pixel, with zero mapped to +1.
    pub fn laplacian_sign(&self, y: usize, x: usize) -> i8 {
        if self.lxx.get(y, x) + self.lyy.get(y, x) < 0.0 {
            -1
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePyramid {
    scales: Vec<ScaleSpec>,
    levels: Vec<ScaleResponse>,
}

impl ResponsePyramid {
    /// Assembles a pyramid from precomputed filter maps, recomputing the
    /// determinant of each level.
    pub fn from_parts(
        scales: Vec<ScaleSpec>,
        maps: Vec<(GrayImage, GrayImage, GrayImage)>,
    ) -> Result<Self> {
        if scales.len() != maps.len() || scales.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "{} scales but {} map triples",
                scales.len(),
                maps.len()
            )));
        }
        let shape = maps[0].0.shape();
        let mut levels = Vec::with_capacity(maps.len());
        for (lxx, lyy, lxy) in maps {
            if lxx.shape() != shape {
                return Err(Error::ShapeMismatch {
                    left: shape,
                    right: lxx.shape(),
                });
            }
            let det = hessian_determinant(&lxx, &lyy, &lxy)?;
            levels.push(ScaleResponse { lxx, lyy, lxy, det });
        }
        Ok(Self { scales, levels })
    }

    pub fn scales(&self) -> &[ScaleSpec] {
        &self.scales
    }

    pub fn levels(&self) -> &[ScaleResponse] {
        &self.levels
    }

    pub fn det(&self, scale_index: usize) -> &GrayImage {
        &self.levels[scale_index].det
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.levels[0].det.shape()
    }
}

pub(crate) fn check_fits(img: &GrayImage, scales: &[ScaleSpec]) -> Result<()> {
    let largest = scales.iter().map(|s| s.filter_size()).max().unwrap_or(0);
    if img.height() < largest || img.width() < largest {
        return Err(Error::ImageTooSmall {
            height: img.height(),
            width: img.width(),
            filter: largest,
        });
    }
    Ok(())
}

/// Determinant-of-Hessian maps for each scale, same size as `img`.
pub fn detector_response(img: &GrayImage, scales: &[ScaleSpec]) -> Result<ResponsePyramid> {
    if scales.is_empty() {
        return Err(Error::InvalidConfig("no scales".into()));
    }
    check_fits(img, scales)?;
    let ii = IntegralImage::new(img);
    let levels = scales
        .par_iter()
        .map(|spec| ScaleResponse::compute(&ii, spec))
        .collect();
    Ok(ResponsePyramid {
        scales: scales.to_vec(),
        levels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub scale_index: usize,
    pub response: f64,
    pub laplacian_sign: i8,
}

/// Strict 3×3×3 scale-space maxima above `threshold`.
///
/// Candidates are restricted to pixels whose filter footprint at their own
/// scale lies inside the image; truncated borders produce spurious
/// responses. Output is sorted by descending response, ties broken by
/// `(y, x, scale_index)`.
pub fn extract_keypoints(pyr: &ResponsePyramid, threshold: f64) -> Vec<Keypoint> {
    let (h, w) = pyr.shape();
    let n = pyr.len();
    let mut keypoints: Vec<Keypoint> = (0..n)
        .into_par_iter()
        .flat_map_iter(|s| {
            let margin = pyr.scales[s].radius();
            let det = pyr.det(s);
            let lo = s.saturating_sub(1);
            let hi = (s + 1).min(n - 1);
            let mut found = Vec::new();
            if h <= 2 * margin || w <= 2 * margin {
                return found.into_iter();
            }
            for y in margin..h - margin {
                'pixel: for x in margin..w - margin {
                    let v = det.get(y, x);
                    if v <= threshold {
                        continue;
                    }
                    for t in lo..=hi {
                        let other = pyr.det(t);
                        for ny in y - 1..=y + 1 {
                            for nx in x - 1..=x + 1 {
                                if t == s && ny == y && nx == x {
                                    continue;
                                }
                                if other.get(ny, nx) >= v {
                                    continue 'pixel;
                                }
                            }
                        }
                    }
                    found.push(Keypoint {
                        x,
                        y,
                        scale_index: s,
                        response: v,
                        laplacian_sign: pyr.levels[s].laplacian_sign(y, x),
                    });
                }
            }
            found.into_iter()
        })
        .collect();
    keypoints.sort_by(compare_keypoints);
    keypoints
}

fn compare_keypoints(a: &Keypoint, b: &Keypoint) -> Ordering {
    b.response
        .total_cmp(&a.response)
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
        .then(a.scale_index.cmp(&b.scale_index))
}

/// CSV with header `x,y,scale_index,response,laplacian_sign`.
pub fn write_keypoints_csv<W: Write>(writer: W, keypoints: &[Keypoint]) -> Result<()> {
    let mut csv = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    csv.write_record(["x", "y", "scale_index", "response", "laplacian_sign"])?;
    for kp in keypoints {
        csv.serialize(kp)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_keypoints_csv<R: std::io::Read>(reader: R) -> Result<Vec<Keypoint>> {
    let mut csv = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in csv.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
