//! Reverse-mode gradients of the detector and descriptor maps with respect
//! to the input image, and a finite-difference harness that checks them.
//!
//! Each VJP replays the forward pass and routes the cotangent back through
//! it stage by stage. A box filter's adjoint is the point-reflected filter
//! under the same truncated borders. A clamped plane shift's adjoint is a
//! scatter onto the clamped source positions. Edge replication folds back
//! onto the edge pixels. `|·|` passes `sign(x)` with `sign(0) = 0`, and the
//! L2 normalisation contributes `(I − v̂v̂ᵀ)/‖v‖`, or nothing for zero vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{
    build_lut, dense_descriptors_fast, forward_fast, haar_filters, haar_planes,
    scatter_shifted_row, DescriptorLut, CHANNELS, DEGENERATE_NORM, NEIGHBOURHOODS, SAMPLES,
};
use crate::detector::{hessian_filters, ScaleResponse, ScaleSpec, CROSS_TERM_WEIGHT};
use crate::error::{Error, Result};
use crate::image::{convolve_box_filter_adjoint, GrayImage, IntegralImage};
use crate::losses;

/// Gradient of a scalar objective with respect to each pixel.
pub type ImageGradient = GrayImage;

/// Relative tolerance for finite-difference agreement.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-3;
/// Step and tolerance for the dot-product adjoint test.
pub const ADJOINT_STEP: f64 = 1e-4;
pub const ADJOINT_TOLERANCE: f64 = 1e-6;
/// Quantities closer than this to a kink are excluded from checks.
pub const KINK_EPS: f64 = 1e-4;

/// Adjoint seed shaped like a forward output: one channel for a response
/// map, 64 for a dense descriptor map.
#[derive(Debug, Clone, PartialEq)]
pub struct CotangentMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl CotangentMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::BufferLength {
                expected: channels * height * width,
                actual: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_map(map: &GrayImage) -> Self {
        Self {
            channels: 1,
            height: map.height(),
            width: map.width(),
            data: map.as_slice().to_vec(),
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.data.iter().zip(values).map(|(a, b)| a * b).sum()
    }

    fn expect_shape(&self, channels: usize, shape: (usize, usize)) -> Result<()> {
        if self.channels != channels || (self.height, self.width) != shape {
            return Err(Error::ShapeMismatch {
                left: (self.channels * self.height, self.width),
                right: (channels * shape.0, shape.1),
            });
        }
        Ok(())
    }
}

fn hadamard(a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| scale * x * y).collect()
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    acc.iter_mut().zip(other).for_each(|(a, b)| *a += b);
}

/// `Jᵀ·seed` for the determinant map of one scale.
pub fn detector_vjp(
    img: &GrayImage,
    spec: &ScaleSpec,
    seed: &CotangentMap,
) -> Result<ImageGradient> {
    seed.expect_shape(1, img.shape())?;
    let (h, w) = img.shape();
    let resp = ScaleResponse::compute(&IntegralImage::new(img), spec);
    let filters = hessian_filters(spec);
    let s = seed.as_slice();
    let g_xx = GrayImage::from_vec_unchecked(h, w, hadamard(s, resp.lyy.as_slice(), 1.0));
    let g_yy = GrayImage::from_vec_unchecked(h, w, hadamard(s, resp.lxx.as_slice(), 1.0));
    let g_xy = GrayImage::from_vec_unchecked(
        h,
        w,
        hadamard(s, resp.lxy.as_slice(), -2.0 * CROSS_TERM_WEIGHT),
    );
    let mut grad = convolve_box_filter_adjoint(&g_xx, &filters.xx).into_vec();
    add_into(
        &mut grad,
        convolve_box_filter_adjoint(&g_yy, &filters.yy).as_slice(),
    );
    add_into(
        &mut grad,
        convolve_box_filter_adjoint(&g_xy, &filters.xy).as_slice(),
    );
    Ok(GrayImage::from_vec_unchecked(h, w, grad))
}

/// Routes Haar-plane cotangents back to the image: box adjoint on the
/// padded domain, fold of the edge replication, then the mean-centring
/// adjoint.
pub(crate) fn haar_vjp(g_dx: &GrayImage, g_dy: &GrayImage, step: usize) -> ImageGradient {
    let (fx, fy) = haar_filters(step);
    let mut padded = convolve_box_filter_adjoint(&g_dx.embed(step), &fx).into_vec();
    add_into(
        &mut padded,
        convolve_box_filter_adjoint(&g_dy.embed(step), &fy).as_slice(),
    );
    let (ph, pw) = (g_dx.height() + 2 * step, g_dx.width() + 2 * step);
    let folded = GrayImage::from_vec_unchecked(ph, pw, padded)
        .fold_replicate(step)
        .expect("padded by step");
    let mean = folded.mean();
    let (h, w) = folded.shape();
    GrayImage::from_vec_unchecked(
        h,
        w,
        folded.into_vec().into_iter().map(|v| v - mean).collect(),
    )
}

/// `Jᵀ·seed` for the normalised dense descriptor map of one scale.
pub fn descriptor_vjp(
    img: &GrayImage,
    spec: &ScaleSpec,
    lut: &DescriptorLut,
    seed: &CotangentMap,
) -> Result<ImageGradient> {
    seed.expect_shape(CHANNELS, img.shape())?;
    debug_assert_eq!(spec.step(), lut.step);
    let (h, w) = img.shape();
    let plane = h * w;
    let fwd = forward_fast(img, lut);
    let g = seed.as_slice();

    // through the normalisation
    let mut g_raw = vec![0.0; CHANNELS * plane];
    for p in 0..plane {
        let norm = fwd.norms[p];
        if norm <= DEGENERATE_NORM {
            continue;
        }
        let mut dot = 0.0;
        for c in 0..CHANNELS {
            dot += fwd.raw[c * plane + p] / norm * g[c * plane + p];
        }
        for c in 0..CHANNELS {
            let v = fwd.raw[c * plane + p] / norm;
            g_raw[c * plane + p] = (g[c * plane + p] - v * dot) / norm;
        }
    }

    // through the neighbourhood weights and shifted accumulations
    let partials: Vec<[Vec<f64>; 4]> = (0..NEIGHBOURHOODS)
        .into_par_iter()
        .map(|n| {
            let gn = lut.neighbourhood_weights[n];
            let block = &g_raw[4 * n * plane..4 * (n + 1) * plane];
            let mut out: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; plane]);
            for y in 0..h {
                let src_rows: [Vec<f64>; 4] = std::array::from_fn(|c| {
                    block[c * plane + y * w..c * plane + (y + 1) * w]
                        .iter()
                        .map(|v| gn * v)
                        .collect()
                });
                for k in 0..SAMPLES {
                    let (sy, sx) = lut.shift(n, k);
                    let dst_y = (y as isize + sy).clamp(0, h as isize - 1) as usize;
                    let wk = lut.sample_weights[k];
                    for c in 0..4 {
                        scatter_shifted_row(
                            &mut out[c][dst_y * w..(dst_y + 1) * w],
                            &src_rows[c],
                            sx,
                            wk,
                        );
                    }
                }
            }
            out
        })
        .collect();

    let mut g_hx = vec![0.0; plane];
    let mut g_hy = vec![0.0; plane];
    let mut g_ax = vec![0.0; plane];
    let mut g_ay = vec![0.0; plane];
    for [sx, sy, ax, ay] in &partials {
        add_into(&mut g_hx, sx);
        add_into(&mut g_hy, sy);
        add_into(&mut g_ax, ax);
        add_into(&mut g_ay, ay);
    }
    // through |·|
    for p in 0..plane {
        g_hx[p] += sign(fwd.haar.dx.as_slice()[p]) * g_ax[p];
        g_hy[p] += sign(fwd.haar.dy.as_slice()[p]) * g_ay[p];
    }
    Ok(haar_vjp(
        &GrayImage::from_vec_unchecked(h, w, g_hx),
        &GrayImage::from_vec_unchecked(h, w, g_hy),
        lut.step,
    ))
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(f(x + hv) − f(x − hv)) / 2h`.
pub fn central_difference(
    f: impl Fn(&GrayImage) -> Result<f64>,
    x: &GrayImage,
    v: &GrayImage,
    h: f64,
) -> Result<f64> {
    let plus = f(&x.add_scaled(h, v)?)?;
    let minus = f(&x.add_scaled(-h, v)?)?;
    Ok((plus - minus) / (2.0 * h))
}

/// `|a − b| / max(|a|, |b|)`, with a tiny floor so that two vanishing
/// values compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / scale
}

/// Zeroes `v` on every pixel feeding a Haar response that sits within
/// [`KINK_EPS`] of zero or changes sign over `x ± h·v`, repeating until the
/// set is stable. Returns the number of masked pixels.
pub(crate) fn mask_haar_kinks(
    x: &GrayImage,
    v: &mut GrayImage,
    step: usize,
    h: f64,
) -> Result<usize> {
    let probe = |img: &GrayImage| {
        let r = haar_planes(img, step);
        (r.dx.into_vec(), r.dy.into_vec())
    };
    let (cx, cy) = probe(x);
    let (ih, iw) = x.shape();
    let mut masked = vec![false; ih * iw];
    for _ in 0..32 {
        let (px, py) = probe(&x.add_scaled(h, v)?);
        let (mx, my) = probe(&x.add_scaled(-h, v)?);
        let mut changed = false;
        for q in 0..ih * iw {
            let kink = |c: f64, p: f64, m: f64| {
                c.abs() < KINK_EPS || sign(c) != sign(p) || sign(c) != sign(m)
            };
            if !(kink(cx[q], px[q], mx[q]) || kink(cy[q], py[q], my[q])) {
                continue;
            }
            let (qy, qx) = ((q / iw) as isize, (q % iw) as isize);
            let s = step as isize;
            for yy in (qy - s).max(0)..(qy + s).min(ih as isize) {
                for xx in (qx - s).max(0)..(qx + s).min(iw as isize) {
                    let idx = yy as usize * iw + xx as usize;
                    if !masked[idx] {
                        masked[idx] = true;
                        changed = true;
                    }
                }
            }
            // edge replication lets border responses read clamped pixels
            if qy - s < 0 || qx - s < 0 || qy + s > ih as isize || qx + s > iw as isize {
                let y0 = (qy - s).clamp(0, ih as isize - 1);
                let y1 = (qy + s - 1).clamp(0, ih as isize - 1);
                let x0 = (qx - s).clamp(0, iw as isize - 1);
                let x1 = (qx + s - 1).clamp(0, iw as isize - 1);
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let idx = yy as usize * iw + xx as usize;
                        if !masked[idx] {
                            masked[idx] = true;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
        let data = v
            .as_slice()
            .iter()
            .zip(&masked)
            .map(|(&d, &m)| if m { 0.0 } else { d })
            .collect();
        *v = GrayImage::new(ih, iw, data)?;
    }
    Ok(masked.iter().filter(|&&m| m).count())
}

/// Outcome of comparing one directional derivative against the VJP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionCheck {
    pub finite_difference: f64,
    pub analytic: f64,
    pub rel_error: f64,
    /// Input pixels and output elements left out as near-kink or degenerate.
    pub excluded: usize,
    /// Seed entries that survived exclusion.
    pub active: usize,
}

/// Compares `seedᵀ·(D(x+hv) − D(x−hv))/2h` with `vᵀ·detector_vjp(seed)`.
pub fn check_detector_direction(
    img: &GrayImage,
    spec: &ScaleSpec,
    seed: &CotangentMap,
    v: &GrayImage,
    h: f64,
) -> Result<DirectionCheck> {
    let forward = |x: &GrayImage| -> Result<f64> {
        let r = ScaleResponse::compute(&IntegralImage::new(x), spec);
        Ok(seed.dot(r.det.as_slice()))
    };
    let fd = central_difference(forward, img, v, h)?;
    let analytic = detector_vjp(img, spec, seed)?.dot(v);
    Ok(DirectionCheck {
        finite_difference: fd,
        analytic,
        rel_error: relative_error(fd, analytic),
        excluded: 0,
        active: seed.as_slice().iter().filter(|&&s| s != 0.0).count(),
    })
}

/// Descriptor counterpart of [`check_detector_direction`]. Haar kinks are
/// removed from `v`; pixels whose descriptor norm is near zero at any of the
/// three evaluation points are removed from the seed.
pub fn check_descriptor_direction(
    img: &GrayImage,
    spec: &ScaleSpec,
    lut: &DescriptorLut,
    seed: &CotangentMap,
    v: &GrayImage,
    h: f64,
) -> Result<DirectionCheck> {
    seed.expect_shape(CHANNELS, img.shape())?;
    let mut v = v.clone();
    let masked_pixels = mask_haar_kinks(img, &mut v, lut.step, h)?;

    let plane = img.len();
    let norms_at = |x: &GrayImage| forward_fast(x, lut).norms;
    let n0 = norms_at(img);
    let np = norms_at(&img.add_scaled(h, &v)?);
    let nm = norms_at(&img.add_scaled(-h, &v)?);
    let mut seed = seed.clone();
    let mut degenerate = 0;
    for p in 0..plane {
        if n0[p].min(np[p]).min(nm[p]) < KINK_EPS {
            degenerate += 1;
            for c in 0..CHANNELS {
                seed.data[c * plane + p] = 0.0;
            }
        }
    }
    let active = seed.as_slice().iter().filter(|&&s| s != 0.0).count();
    let forward = |x: &GrayImage| -> Result<f64> {
        Ok(seed.dot(dense_descriptors_fast(x, spec, lut).as_slice()))
    };
    let fd = central_difference(forward, img, &v, h)?;
    let analytic = descriptor_vjp(img, spec, lut, &seed)?.dot(&v);
    Ok(DirectionCheck {
        finite_difference: fd,
        analytic,
        rel_error: relative_error(fd, analytic),
        excluded: masked_pixels + degenerate,
        active,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GradcheckOp {
    Detector,
    Descriptor,
    Losses,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Passed,
    Failed,
    SkippedDegenerate,
    SubgradientAmbiguous,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImageSource {
    Random,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub op: GradcheckOp,
    pub trials: usize,
    pub seed: u64,
    pub source: ImageSource,
    /// Losses only: compare an image against itself.
    pub identical_pair: bool,
    pub directions: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl GradcheckOptions {
    pub fn new(op: GradcheckOp, trials: usize, seed: u64) -> Self {
        Self {
            op,
            trials,
            seed,
            source: ImageSource::Random,
            identical_pair: false,
            directions: 4,
            step: FD_STEP,
            tolerance: GRADCHECK_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub filter_size: usize,
    pub status: TrialStatus,
    pub max_rel_error: Option<f64>,
    /// Dot-product adjoint test at the smaller step, where applicable.
    pub adjoint_rel_error: Option<f64>,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub op: GradcheckOp,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub adjoint_tolerance: f64,
    pub trials: Vec<TrialReport>,
    pub passed: bool,
}

fn uniform_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> GrayImage {
    let data = (0..h * w).map(|_| rng.random_range(lo..hi)).collect();
    GrayImage::from_vec_unchecked(h, w, data)
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Randomised finite-difference validation of the VJPs.
///
/// Detector trials use 24×24 images and cycle through filter sizes 9, 15
/// and 21; descriptor trials use 16×16 images at the smallest step; loss
/// trials check the rec, det and desc terms on 24×24 pairs.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trials = Vec::with_capacity(opts.trials);
    for trial in 0..opts.trials {
        let report = match opts.op {
            GradcheckOp::Detector => detector_trial(opts, trial, &mut rng)?,
            GradcheckOp::Descriptor => descriptor_trial(opts, trial, &mut rng)?,
            GradcheckOp::Losses => losses_trial(opts, trial, &mut rng)?,
        };
        trials.push(report);
    }
    let passed = trials.iter().all(|t| t.status != TrialStatus::Failed);
    Ok(GradcheckReport {
        op: opts.op,
        seed: opts.seed,
        step: opts.step,
        tolerance: opts.tolerance,
        adjoint_tolerance: ADJOINT_TOLERANCE,
        trials,
        passed,
    })
}

fn trial_image(opts: &GradcheckOptions, rng: &mut ChaCha8Rng, size: usize) -> GrayImage {
    match opts.source {
        ImageSource::Random => uniform_image(rng, size, size, 0.0, 1.0),
        ImageSource::Constant(c) => GrayImage::from_vec_unchecked(size, size, vec![c; size * size]),
    }
}

fn status_for(max_err: f64, adjoint: Option<f64>, tol: f64) -> TrialStatus {
    if max_err <= tol && adjoint.is_none_or(|a| a <= ADJOINT_TOLERANCE) {
        TrialStatus::Passed
    } else {
        TrialStatus::Failed
    }
}

fn detector_trial(
    opts: &GradcheckOptions,
    trial: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrialReport> {
    const SIZE: usize = 24;
    let spec = ScaleSpec::new([9, 15, 21][trial % 3])?;
    let img = trial_image(opts, rng, SIZE);
    let seed = CotangentMap::new(1, SIZE, SIZE, uniform_vec(rng, SIZE * SIZE))?;
    let mut max_err: f64 = 0.0;
    for _ in 0..opts.directions.max(1) {
        let v = uniform_image(rng, SIZE, SIZE, -1.0, 1.0);
        let c = check_detector_direction(&img, &spec, &seed, &v, opts.step)?;
        max_err = max_err.max(c.rel_error);
    }
    let v = uniform_image(rng, SIZE, SIZE, -1.0, 1.0);
    let adjoint = check_detector_direction(&img, &spec, &seed, &v, ADJOINT_STEP)?.rel_error;
    Ok(TrialReport {
        trial,
        filter_size: spec.filter_size(),
        status: status_for(max_err, Some(adjoint), opts.tolerance),
        max_rel_error: Some(max_err),
        adjoint_rel_error: Some(adjoint),
        excluded: 0,
    })
}

fn descriptor_trial(
    opts: &GradcheckOptions,
    trial: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrialReport> {
    const SIZE: usize = 16;
    let spec = ScaleSpec::new(9)?;
    let lut = build_lut(&spec);
    let img = trial_image(opts, rng, SIZE);
    let seed = CotangentMap::new(
        CHANNELS,
        SIZE,
        SIZE,
        uniform_vec(rng, CHANNELS * SIZE * SIZE),
    )?;
    let mut max_err: f64 = 0.0;
    let mut excluded = 0;
    for _ in 0..opts.directions.max(1) {
        let v = uniform_image(rng, SIZE, SIZE, -1.0, 1.0);
        let c = check_descriptor_direction(&img, &spec, &lut, &seed, &v, opts.step)?;
        excluded = excluded.max(c.excluded);
        if c.active == 0 {
            return Ok(TrialReport {
                trial,
                filter_size: spec.filter_size(),
                status: TrialStatus::SkippedDegenerate,
                max_rel_error: None,
                adjoint_rel_error: None,
                excluded: c.excluded,
            });
        }
        max_err = max_err.max(c.rel_error);
    }
    let v = uniform_image(rng, SIZE, SIZE, -1.0, 1.0);
    let adjoint = check_descriptor_direction(&img, &spec, &lut, &seed, &v, ADJOINT_STEP)?.rel_error;
    Ok(TrialReport {
        trial,
        filter_size: spec.filter_size(),
        status: status_for(max_err, Some(adjoint), opts.tolerance),
        max_rel_error: Some(max_err),
        adjoint_rel_error: Some(adjoint),
        excluded,
    })
}

fn losses_trial(
    opts: &GradcheckOptions,
    trial: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrialReport> {
    const SIZE: usize = 24;
    let spec = ScaleSpec::new(9)?;
    let scales = [spec];
    let luts = [build_lut(&spec)];
    let a = trial_image(opts, rng, SIZE);
    let b = if opts.identical_pair {
        a.clone()
    } else {
        trial_image(opts, rng, SIZE)
    };
    let mut max_err: f64 = 0.0;
    let mut excluded = 0;
    let mut any_active = false;
    for _ in 0..opts.directions.max(1) {
        let v = uniform_image(rng, SIZE, SIZE, -1.0, 1.0);
        for check in losses::check_loss_terms(&a, &b, &scales, &luts, &v, opts.step)? {
            excluded = excluded.max(check.excluded);
            if check.active > 0 {
                any_active = true;
                max_err = max_err.max(check.rel_error);
            }
        }
    }
    let status = if !any_active {
        TrialStatus::SubgradientAmbiguous
    } else {
        status_for(max_err, None, opts.tolerance)
    };
    Ok(TrialReport {
        trial,
        filter_size: spec.filter_size(),
        status,
        max_rel_error: any_active.then_some(max_err),
        adjoint_rel_error: None,
        excluded,
    })
}
