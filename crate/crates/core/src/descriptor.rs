//! Dense per-pixel upright SURF descriptors.
//!
//! Every pixel gets the 64-vector a classic U-SURF descriptor would have at
//! that location: 4×4 neighbourhoods spaced `5s` apart, each summarising
//! 9×9 Gaussian-weighted Haar responses sampled at step `s`. The fast path
//! never gathers per pixel. It shifts whole Haar response planes by each of
//! the 16×81 (neighbourhood, sample) offsets and accumulates them with a
//! fused multiply-add per row. [`dense_descriptors_naive`] evaluates the
//! same definition one pixel at a time and is kept as the reference.
//!
//! Channel layout is neighbourhood-major, component-minor: channel
//! `4·n + c` holds component `c` (Σdx, Σdy, Σ|dx|, Σ|dy|) of neighbourhood
//! `n = 4·row + col` of the 4×4 grid.

use rayon::prelude::*;

use crate::detector::{Keypoint, ScaleSpec};
use crate::error::{Error, Result};
use crate::image::{BoxFilterSpec, BoxRect, GrayImage, IntegralImage};

pub const CHANNELS: usize = 64;
pub const SAMPLES: usize = 81;
pub const NEIGHBOURHOODS: usize = 16;

/// Neighbourhood centres along each axis, in units of the step `s`.
const CENTER_GRID: [f64; 4] = [-7.5, -2.5, 2.5, 7.5];
/// Neighbourhood positions in units of the `5s` spacing, for the outer Gaussian.
const NEIGHBOURHOOD_GRID: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];
const SAMPLE_SIGMA_PER_STEP: f64 = 2.5;
const NEIGHBOURHOOD_SIGMA: f64 = 1.5;

/// Descriptor vectors with a smaller L2 norm are treated as the zero vector.
/// Sits well above the round-off floor of integral-image box sums.
pub const DEGENERATE_NORM: f64 = 1e-9;

fn gaussian(dy: f64, dx: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    (-(dx * dx + dy * dy) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2)
}

/// Precomputed offsets and weights for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorLut {
    pub step: usize,
    /// `(dy, dx)` of the 9×9 sample grid, row-major.
    pub offsets: [(isize, isize); SAMPLES],
    pub sample_weights: [f64; SAMPLES],
    /// `(dy, dx)` of the 4×4 neighbourhood centres, row-major.
    pub centers: [(isize, isize); NEIGHBOURHOODS],
    pub neighbourhood_weights: [f64; NEIGHBOURHOODS],
}

impl DescriptorLut {
    /// Combined shift of sample `k` in neighbourhood `n`.
    #[inline]
    pub fn shift(&self, n: usize, k: usize) -> (isize, isize) {
        let (cy, cx) = self.centers[n];
        let (oy, ox) = self.offsets[k];
        (cy + oy, cx + ox)
    }

    /// Chebyshev radius of pixels that can influence a descriptor: furthest
    /// sample plus the Haar half-width.
    pub fn footprint_radius(&self) -> usize {
        let c = self
            .centers
            .iter()
            .map(|&(y, _)| y.unsigned_abs())
            .max()
            .unwrap();
        c + 4 * self.step + self.step
    }
}

pub fn build_lut(spec: &ScaleSpec) -> DescriptorLut {
    let s = spec.step();
    let sf = s as f64;
    let sigma1 = SAMPLE_SIGMA_PER_STEP * sf;

    let mut offsets = [(0isize, 0isize); SAMPLES];
    let mut sample_weights = [0.0; SAMPLES];
    for i in 0..9 {
        for j in 0..9 {
            let dy = ((i as f64 - 4.0) * sf).round() as isize;
            let dx = ((j as f64 - 4.0) * sf).round() as isize;
            offsets[i * 9 + j] = (dy, dx);
            sample_weights[i * 9 + j] = gaussian(dy as f64, dx as f64, sigma1);
        }
    }

    let mut centers = [(0isize, 0isize); NEIGHBOURHOODS];
    let mut neighbourhood_weights = [0.0; NEIGHBOURHOODS];
    for a in 0..4 {
        for b in 0..4 {
            // f64::round is half-away-from-zero
            centers[a * 4 + b] = (
                (CENTER_GRID[a] * sf).round() as isize,
                (CENTER_GRID[b] * sf).round() as isize,
            );
            neighbourhood_weights[a * 4 + b] = gaussian(
                NEIGHBOURHOOD_GRID[a],
                NEIGHBOURHOOD_GRID[b],
                NEIGHBOURHOOD_SIGMA,
            );
        }
    }

    DescriptorLut {
        step: s,
        offsets,
        sample_weights,
        centers,
        neighbourhood_weights,
    }
}

/// X and Y Haar wavelets of side `2s`, area-normalised. X is the right half
/// minus the left half; Y is the bottom half minus the top half.
pub fn haar_filters(step: usize) -> (BoxFilterSpec, BoxFilterSpec) {
    let s = step as isize;
    let norm = 1.0 / (4 * step * step) as f64;
    let x = BoxFilterSpec::new(vec![
        BoxRect::new(-s, 0, 2 * step, step, norm),
        BoxRect::new(-s, -s, 2 * step, step, -norm),
    ])
    .expect("non-empty");
    let y = BoxFilterSpec::new(vec![
        BoxRect::new(0, -s, step, 2 * step, norm),
        BoxRect::new(-s, -s, step, 2 * step, -norm),
    ])
    .expect("non-empty");
    (x, y)
}

/// Integral image of the mean-centred, edge-replicated source. Haar
/// wavelets read pixel coordinates clamped to the image, so they stay
/// zero-mean at the border; centring keeps flat regions exactly flat.
pub(crate) struct HaarSource {
    margin: usize,
    ii: IntegralImage,
    x: BoxFilterSpec,
    y: BoxFilterSpec,
}

impl HaarSource {
    pub(crate) fn new(img: &GrayImage, step: usize) -> Self {
        let mean = img.mean();
        let centred = GrayImage::from_vec_unchecked(
            img.height(),
            img.width(),
            img.as_slice().iter().map(|v| v - mean).collect(),
        );
        let padded = centred.pad_replicate(step);
        let (x, y) = haar_filters(step);
        Self {
            margin: step,
            ii: IntegralImage::new(&padded),
            x,
            y,
        }
    }

    /// Haar responses at an in-image pixel.
    #[inline]
    pub(crate) fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let (py, px) = ((y + self.margin) as isize, (x + self.margin) as isize);
        (
            self.x.apply_at(&self.ii, py, px),
            self.y.apply_at(&self.ii, py, px),
        )
    }
}

/// Per-pixel X and Y Haar wavelet responses at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarResponses {
    pub dx: GrayImage,
    pub dy: GrayImage,
}

pub fn haar_responses(img: &GrayImage, spec: &ScaleSpec) -> HaarResponses {
    haar_planes(img, spec.step())
}

pub(crate) fn haar_planes(img: &GrayImage, step: usize) -> HaarResponses {
    let (h, w) = img.shape();
    let src = HaarSource::new(img, step);
    let mut dx = vec![0.0; h * w];
    let mut dy = vec![0.0; h * w];
    dx.par_chunks_mut(w)
        .zip(dy.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (rx, ry))| {
            for x in 0..w {
                let (vx, vy) = src.at(y, x);
                rx[x] = vx;
                ry[x] = vy;
            }
        });
    HaarResponses {
        dx: GrayImage::from_vec_unchecked(h, w, dx),
        dy: GrayImage::from_vec_unchecked(h, w, dy),
    }
}

/// 64-channel descriptor field, stored channel-major as `(64, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDescriptorMap {
    pub scale_index: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DenseDescriptorMap {
    pub fn new(scale_index: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::BufferLength {
                expected: CHANNELS * height * width,
                actual: data.len(),
            });
        }
        Ok(Self {
            scale_index,
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn vector_at(&self, y: usize, x: usize) -> [f64; CHANNELS] {
        std::array::from_fn(|c| self.get(c, y, x))
    }

    pub fn max_abs_diff(&self, other: &DenseDescriptorMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Adds `weight · src[clamp(x + shift)]` to every `dst[x]`.
#[inline]
fn add_shifted_row(dst: &mut [f64], src: &[f64], shift: isize, weight: f64) {
    let w = dst.len() as isize;
    let lo = (-shift).clamp(0, w) as usize;
    let hi = (w - shift).clamp(0, w) as usize;
    let (first, last) = (src[0], src[w as usize - 1]);
    if lo >= hi {
        let v = if shift > 0 { last } else { first };
        dst.iter_mut().for_each(|d| *d += weight * v);
        return;
    }
    dst[..lo].iter_mut().for_each(|d| *d += weight * first);
    let start = (lo as isize + shift) as usize;
    dst[lo..hi]
        .iter_mut()
        .zip(&src[start..start + (hi - lo)])
        .for_each(|(d, &s)| *d += weight * s);
    dst[hi..].iter_mut().for_each(|d| *d += weight * last);
}

/// Adjoint of [`add_shifted_row`]: scatters `weight · src[x]` onto
/// `dst[clamp(x + shift)]`.
#[inline]
pub(crate) fn scatter_shifted_row(dst: &mut [f64], src: &[f64], shift: isize, weight: f64) {
    let w = dst.len() as isize;
    let lo = (-shift).clamp(0, w) as usize;
    let hi = (w - shift).clamp(0, w) as usize;
    let last = w as usize - 1;
    if lo >= hi {
        let total: f64 = src.iter().sum();
        dst[if shift > 0 { last } else { 0 }] += weight * total;
        return;
    }
    let head: f64 = src[..lo].iter().sum();
    dst[0] += weight * head;
    let start = (lo as isize + shift) as usize;
    dst[start..start + (hi - lo)]
        .iter_mut()
        .zip(&src[lo..hi])
        .for_each(|(d, &s)| *d += weight * s);
    let tail: f64 = src[hi..].iter().sum();
    dst[last] += weight * tail;
}

/// Unnormalised field plus the Haar planes it was built from.
pub(crate) struct DescriptorForward {
    pub(crate) haar: HaarResponses,
    /// `(64, H, W)` after neighbourhood weighting, before normalisation.
    pub(crate) raw: Vec<f64>,
    pub(crate) norms: Vec<f64>,
}

pub(crate) fn forward_fast(img: &GrayImage, lut: &DescriptorLut) -> DescriptorForward {
    let (h, w) = img.shape();
    let plane = h * w;
    let HaarResponses { dx, dy } = haar_planes(img, lut.step);
    let (hx, hy) = (dx.into_vec(), dy.into_vec());
    let ax: Vec<f64> = hx.iter().map(|v| v.abs()).collect();
    let ay: Vec<f64> = hy.iter().map(|v| v.abs()).collect();

    let mut raw = vec![0.0; CHANNELS * plane];
    raw.par_chunks_mut(4 * plane)
        .enumerate()
        .for_each(|(n, block)| {
            let (sum_dx, rest) = block.split_at_mut(plane);
            let (sum_dy, rest) = rest.split_at_mut(plane);
            let (abs_dx, abs_dy) = rest.split_at_mut(plane);
            for y in 0..h {
                let row = y * w..(y + 1) * w;
                let (o_sx, o_sy) = (&mut sum_dx[row.clone()], &mut sum_dy[row.clone()]);
                let (o_ax, o_ay) = (&mut abs_dx[row.clone()], &mut abs_dy[row]);
                for k in 0..SAMPLES {
                    let (sy, sx) = lut.shift(n, k);
                    let src_y = (y as isize + sy).clamp(0, h as isize - 1) as usize;
                    let src = src_y * w..(src_y + 1) * w;
                    let wk = lut.sample_weights[k];
                    add_shifted_row(o_sx, &hx[src.clone()], sx, wk);
                    add_shifted_row(o_sy, &hy[src.clone()], sx, wk);
                    add_shifted_row(o_ax, &ax[src.clone()], sx, wk);
                    add_shifted_row(o_ay, &ay[src], sx, wk);
                }
            }
            let gn = lut.neighbourhood_weights[n];
            block.iter_mut().for_each(|v| *v *= gn);
        });

    let norms = channel_norms(&raw, plane);
    DescriptorForward {
        haar: HaarResponses {
            dx: GrayImage::from_vec_unchecked(h, w, hx),
            dy: GrayImage::from_vec_unchecked(h, w, hy),
        },
        raw,
        norms,
    }
}

/// Per-pixel L2 norm over the 64 channel planes, summed in channel order.
fn channel_norms(raw: &[f64], plane: usize) -> Vec<f64> {
    let mut sq = vec![0.0; plane];
    for c in 0..CHANNELS {
        sq.iter_mut()
            .zip(&raw[c * plane..(c + 1) * plane])
            .for_each(|(acc, &v)| *acc += v * v);
    }
    sq.into_iter().map(f64::sqrt).collect()
}

fn normalise_planes(raw: &mut [f64], norms: &[f64]) {
    let plane = norms.len();
    raw.par_chunks_mut(plane).for_each(|ch| {
        ch.iter_mut().zip(norms).for_each(|(v, &n)| {
            if n > DEGENERATE_NORM {
                *v /= n;
            } else {
                *v = 0.0;
            }
        });
    });
}

/// Dense descriptor map by the stacked shifted-plane formulation.
pub fn dense_descriptors_fast(
    img: &GrayImage,
    spec: &ScaleSpec,
    lut: &DescriptorLut,
) -> DenseDescriptorMap {
    dense_descriptors_fast_indexed(img, spec, lut, 0)
}

pub(crate) fn dense_descriptors_fast_indexed(
    img: &GrayImage,
    _spec: &ScaleSpec,
    lut: &DescriptorLut,
    scale_index: usize,
) -> DenseDescriptorMap {
    let DescriptorForward { mut raw, norms, .. } = forward_fast(img, lut);
    normalise_planes(&mut raw, &norms);
    DenseDescriptorMap {
        scale_index,
        height: img.height(),
        width: img.width(),
        data: raw,
    }
}

/// The fast path without the final L2 normalisation.
pub fn dense_descriptors_unnormalised(img: &GrayImage, lut: &DescriptorLut) -> DenseDescriptorMap {
    let f = forward_fast(img, lut);
    DenseDescriptorMap {
        scale_index: 0,
        height: img.height(),
        width: img.width(),
        data: f.raw,
    }
}

/// Per-pixel reference evaluation: every sample's Haar response is
/// recomputed from box sums at its clamped position.
pub fn dense_descriptors_naive(
    img: &GrayImage,
    _spec: &ScaleSpec,
    lut: &DescriptorLut,
) -> DenseDescriptorMap {
    let (h, w) = img.shape();
    let plane = h * w;
    let src = HaarSource::new(img, lut.step);
    let mut data = vec![0.0; CHANNELS * plane];
    for y in 0..h {
        for x in 0..w {
            let mut v = [0.0f64; CHANNELS];
            for n in 0..NEIGHBOURHOODS {
                let mut acc = [0.0f64; 4];
                for k in 0..SAMPLES {
                    let (dy, dx) = lut.shift(n, k);
                    let qy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let qx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let (rx, ry) = src.at(qy, qx);
                    let wk = lut.sample_weights[k];
                    acc[0] += wk * rx;
                    acc[1] += wk * ry;
                    acc[2] += (wk * rx).abs();
                    acc[3] += (wk * ry).abs();
                }
                let gn = lut.neighbourhood_weights[n];
                for c in 0..4 {
                    v[4 * n + c] = gn * acc[c];
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for (c, &val) in v.iter().enumerate() {
                data[c * plane + y * w + x] = if norm > DEGENERATE_NORM {
                    val / norm
                } else {
                    0.0
                };
            }
        }
    }
    DenseDescriptorMap {
        scale_index: 0,
        height: h,
        width: w,
        data,
    }
}

/// Dense maps for every scale, tagged with their scale index.
pub fn dense_descriptor_pyramid(
    img: &GrayImage,
    scales: &[ScaleSpec],
    luts: &[DescriptorLut],
) -> Vec<DenseDescriptorMap> {
    scales
        .iter()
        .zip(luts)
        .enumerate()
        .map(|(i, (spec, lut))| dense_descriptors_fast_indexed(img, spec, lut, i))
        .collect()
}

pub fn build_luts(scales: &[ScaleSpec]) -> Vec<DescriptorLut> {
    scales.iter().map(build_lut).collect()
}

/// One sample of a dense field.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: [f64; CHANNELS],
}

impl Descriptor {
    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Looks each keypoint up in the map whose `scale_index` matches.
pub fn describe_keypoints(
    maps: &[DenseDescriptorMap],
    kps: &[Keypoint],
) -> Result<Vec<Descriptor>> {
    kps.iter()
        .enumerate()
        .map(|(index, kp)| {
            let map = maps
                .iter()
                .find(|m| m.scale_index == kp.scale_index)
                .ok_or(Error::KeypointOutOfRange { index })?;
            if kp.y >= map.height || kp.x >= map.width {
                return Err(Error::KeypointOutOfRange { index });
            }
            Ok(Descriptor {
                values: map.vector_at(kp.y, kp.x),
            })
        })
        .collect()
}
