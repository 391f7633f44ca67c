//! Appearance-transfer training losses as pure functions over images and
//! discriminator score maps, with image-space gradients.
//!
//! Every L1 term is a mean over its elements, so the λ weights do not
//! depend on resolution. Adversarial terms are least-squares and likewise
//! averaged over the score map.

use serde::{Deserialize, Serialize};

use crate::autograd::{
    descriptor_vjp, detector_vjp, mask_haar_kinks, relative_error, sign, CotangentMap,
    DirectionCheck, ImageGradient, KINK_EPS,
};
use crate::descriptor::{dense_descriptor_pyramid, forward_fast, DescriptorLut, CHANNELS};
use crate::detector::{detector_response, ScaleSpec};
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Patch-discriminator output, nominally `H/8 × W/8` for an `H × W` input.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let img = GrayImage::new(height, width, data)?;
        Ok(Self {
            height,
            width,
            data: img.into_vec(),
        })
    }

    /// Score map for an `image_height × image_width` discriminator input.
    pub fn for_image(image_height: usize, image_width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(image_height / 8, image_width / 8, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn mean_of(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.data.iter().map(|&v| f(v)).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_det: f64,
    pub lambda_desc: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 8.0,
            lambda_det: 2.0,
            lambda_desc: 2.0,
            lambda_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(
        lambda_rec: f64,
        lambda_det: f64,
        lambda_desc: f64,
        lambda_adv: f64,
    ) -> Result<Self> {
        let w = Self {
            lambda_rec,
            lambda_det,
            lambda_desc,
            lambda_adv,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_det", self.lambda_det),
            ("lambda_desc", self.lambda_desc),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lambda_rec: self.lambda_rec * factor,
            lambda_det: self.lambda_det * factor,
            lambda_desc: self.lambda_desc * factor,
            lambda_adv: self.lambda_adv * factor,
        }
    }

    pub fn generator_total(&self, rec: f64, det: f64, desc: f64, adv: f64) -> f64 {
        self.lambda_rec * rec
            + self.lambda_det * det
            + self.lambda_desc * desc
            + self.lambda_adv * adv
    }

    pub fn finetune_total(&self, det: f64, desc: f64) -> f64 {
        self.lambda_det * det + self.lambda_desc * desc
    }
}

/// Itemised loss components; absent entries were not evaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub det: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub desc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_det: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_desc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<f64>,
}

/// `mean((score − 1)²)`: the generator's term for one discriminator.
pub fn adv_loss(score: &ScoreMap) -> f64 {
    score.mean_of(|s| (s - 1.0) * (s - 1.0))
}

/// Gradient of [`adv_loss`] with respect to the score map.
pub fn adv_loss_grad(score: &ScoreMap) -> ScoreMap {
    let n = score.data.len() as f64;
    ScoreMap {
        height: score.height,
        width: score.width,
        data: score.data.iter().map(|s| 2.0 * (s - 1.0) / n).collect(),
    }
}

/// `mean((real − 1)²) + mean(fake²)`.
pub fn disc_loss(real_score: &ScoreMap, fake_score: &ScoreMap) -> Result<f64> {
    if real_score.shape() != fake_score.shape() {
        return Err(Error::ShapeMismatch {
            left: real_score.shape(),
            right: fake_score.shape(),
        });
    }
    Ok(real_score.mean_of(|s| (s - 1.0) * (s - 1.0)) + fake_score.mean_of(|s| s * s))
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean absolute pixel difference.
pub fn rec_loss(input: &GrayImage, reconstructed: &GrayImage) -> Result<f64> {
    input.ensure_same_shape(reconstructed)?;
    Ok(mean_abs_diff(input.as_slice(), reconstructed.as_slice()))
}

fn det_stack(img: &GrayImage, scales: &[ScaleSpec]) -> Result<Vec<f64>> {
    let pyr = detector_response(img, scales)?;
    Ok(pyr
        .levels()
        .iter()
        .flat_map(|l| l.det.as_slice().iter().copied())
        .collect())
}

fn desc_stack(img: &GrayImage, scales: &[ScaleSpec], luts: &[DescriptorLut]) -> Result<Vec<f64>> {
    check_luts(scales, luts)?;
    Ok(dense_descriptor_pyramid(img, scales, luts)
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect())
}

fn check_luts(scales: &[ScaleSpec], luts: &[DescriptorLut]) -> Result<()> {
    if scales.is_empty() || scales.len() != luts.len() {
        return Err(Error::InvalidConfig(format!(
            "{} scales but {} descriptor tables",
            scales.len(),
            luts.len()
        )));
    }
    Ok(())
}

/// Mean absolute difference of the determinant maps over pixels and scales.
pub fn det_loss(img_a: &GrayImage, img_b: &GrayImage, scales: &[ScaleSpec]) -> Result<f64> {
    img_a.ensure_same_shape(img_b)?;
    Ok(mean_abs_diff(
        &det_stack(img_a, scales)?,
        &det_stack(img_b, scales)?,
    ))
}

/// Mean absolute difference of the dense descriptor maps over channels,
/// pixels and scales.
pub fn desc_loss(
    img_a: &GrayImage,
    img_b: &GrayImage,
    scales: &[ScaleSpec],
    luts: &[DescriptorLut],
) -> Result<f64> {
    img_a.ensure_same_shape(img_b)?;
    Ok(mean_abs_diff(
        &desc_stack(img_a, scales, luts)?,
        &desc_stack(img_b, scales, luts)?,
    ))
}

/// Cycle-consistency generator objective for one direction, with the
/// adversarial term taken from the discriminator's score on the fake.
pub fn generator_objective(
    input: &GrayImage,
    reconstructed: &GrayImage,
    fake_score: &ScoreMap,
    weights: &LossWeights,
    scales: &[ScaleSpec],
    luts: &[DescriptorLut],
) -> Result<LossReport> {
    weights.validate()?;
    let rec = rec_loss(input, reconstructed)?;
    let det = det_loss(input, reconstructed, scales)?;
    let desc = desc_loss(input, reconstructed, scales, luts)?;
    let adv = adv_loss(fake_score);
    Ok(LossReport {
        rec: Some(rec),
        det: Some(det),
        desc: Some(desc),
        adv: Some(adv),
        weights: Some(*weights),
        total: Some(weights.generator_total(rec, det, desc, adv)),
        ..Default::default()
    })
}

/// Detector and descriptor agreement between an aligned target and a
/// synthetic image.
pub fn finetune_objective(
    target: &GrayImage,
    synthetic: &GrayImage,
    weights: &LossWeights,
    scales: &[ScaleSpec],
    luts: &[DescriptorLut],
) -> Result<LossReport> {
    weights.validate()?;
    let det = det_loss(target, synthetic, scales)?;
    let desc = desc_loss(target, synthetic, scales, luts)?;
    Ok(LossReport {
        finetune_det: Some(det),
        finetune_desc: Some(desc),
        weights: Some(*weights),
        total: Some(weights.finetune_total(det, desc)),
        ..Default::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossId {
    Rec,
    Det,
    Desc,
    Gen,
    Finetune,
    Adv,
    Disc,
}

/// Which image argument a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    First,
    Second,
}

fn order<'a>(a: &'a GrayImage, b: &'a GrayImage, wrt: Wrt) -> (&'a GrayImage, &'a GrayImage) {
    match wrt {
        Wrt::First => (a, b),
        Wrt::Second => (b, a),
    }
}

/// `sign(x − other)/N` per pixel: the L1 gradient at `x`.
fn rec_grad(x: &GrayImage, other: &GrayImage) -> ImageGradient {
    let n = x.len() as f64;
    let data = x
        .as_slice()
        .iter()
        .zip(other.as_slice())
        .map(|(a, b)| sign(a - b) / n)
        .collect();
    GrayImage::from_vec_unchecked(x.height(), x.width(), data)
}

fn det_grad(x: &GrayImage, other: &GrayImage, scales: &[ScaleSpec]) -> Result<ImageGradient> {
    let (h, w) = x.shape();
    let px = detector_response(x, scales)?;
    let po = detector_response(other, scales)?;
    let norm = (x.len() * scales.len()) as f64;
    let mut grad = vec![0.0; x.len()];
    for (i, spec) in scales.iter().enumerate() {
        let seed: Vec<f64> = px
            .det(i)
            .as_slice()
            .iter()
            .zip(po.det(i).as_slice())
            .map(|(a, b)| sign(a - b) / norm)
            .collect();
        let g = detector_vjp(x, spec, &CotangentMap::new(1, h, w, seed)?)?;
        grad.iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
    }
    Ok(GrayImage::from_vec_unchecked(h, w, grad))
}

fn desc_grad(
    x: &GrayImage,
    other: &GrayImage,
    scales: &[ScaleSpec],
    luts: &[DescriptorLut],
) -> Result<ImageGradient> {
    check_luts(scales, luts)?;
    let (h, w) = x.shape();
    let mx = dense_descriptor_pyramid(x, scales, luts);
    let mo = dense_descriptor_pyramid(other, scales, luts);
    let norm = (CHANNELS * x.len() * scales.len()) as f64;
    let mut grad = vec![0.0; x.len()];
    for (i, (spec, lut)) in scales.iter().zip(luts).enumerate() {
        let seed: Vec<f64> = mx[i]
            .as_slice()
            .iter()
            .zip(mo[i].as_slice())
            .map(|(a, b)| sign(a - b) / norm)
            .collect();
        let g = descriptor_vjp(x, spec, lut, &CotangentMap::new(CHANNELS, h, w, seed)?)?;
        grad.iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
    }
    Ok(GrayImage::from_vec_unchecked(h, w, grad))
}

/// Gradient of an image-pair loss with respect to one of its images.
/// `gen` differentiates the image terms only; its adversarial term depends
/// on the image through an external discriminator (see [`adv_loss_grad`]).
pub fn loss_grad(
    loss: LossId,
    img_a: &GrayImage,
    img_b: &GrayImage,
    wrt: Wrt,
    weights: &LossWeights,
    scales: &[ScaleSpec],
    luts: &[DescriptorLut],
) -> Result<ImageGradient> {
    img_a.ensure_same_shape(img_b)?;
    let (x, other) = order(img_a, img_b, wrt);
    let combine = |parts: Vec<(f64, ImageGradient)>| -> ImageGradient {
        let mut acc = vec![0.0; x.len()];
        for (lambda, g) in parts {
            acc.iter_mut()
                .zip(g.as_slice())
                .for_each(|(a, b)| *a += lambda * b);
        }
        GrayImage::from_vec_unchecked(x.height(), x.width(), acc)
    };
    match loss {
        LossId::Rec => Ok(rec_grad(x, other)),
        LossId::Det => det_grad(x, other, scales),
        LossId::Desc => desc_grad(x, other, scales, luts),
        LossId::Gen => Ok(combine(vec![
            (weights.lambda_rec, rec_grad(x, other)),
            (weights.lambda_det, det_grad(x, other, scales)?),
            (weights.lambda_desc, desc_grad(x, other, scales, luts)?),
        ])),
        LossId::Finetune => Ok(combine(vec![
            (weights.lambda_det, det_grad(x, other, scales)?),
            (weights.lambda_desc, desc_grad(x, other, scales, luts)?),
        ])),
        LossId::Adv | LossId::Disc => Err(Error::InvalidLoss(format!("{loss:?}").to_lowercase())),
    }
}

/// Finite-difference check of one L1 term `Σ|f(x) − target| / norm`.
///
/// Elements whose difference is within [`KINK_EPS`] of zero, or changes sign
/// across `x ± h·v`, are excluded from both sides of the comparison, as are
/// any flagged in `extra_mask`.
#[allow(clippy::too_many_arguments)]
fn check_l1_term(
    values_at: &dyn Fn(&GrayImage) -> Result<Vec<f64>>,
    target: &[f64],
    norm: f64,
    x: &GrayImage,
    v: &GrayImage,
    h: f64,
    extra_mask: Option<&[bool]>,
    vjp: &dyn Fn(Vec<f64>) -> Result<ImageGradient>,
) -> Result<DirectionCheck> {
    let diff = |img: &GrayImage| -> Result<Vec<f64>> {
        Ok(values_at(img)?
            .iter()
            .zip(target)
            .map(|(a, b)| a - b)
            .collect())
    };
    let d0 = diff(x)?;
    let dp = diff(&x.add_scaled(h, v)?)?;
    let dm = diff(&x.add_scaled(-h, v)?)?;
    let mut plus = 0.0;
    let mut minus = 0.0;
    let mut seed = vec![0.0; d0.len()];
    let mut excluded = 0;
    for i in 0..d0.len() {
        let kink = d0[i].abs() < KINK_EPS
            || sign(d0[i]) != sign(dp[i])
            || sign(d0[i]) != sign(dm[i])
            || extra_mask.is_some_and(|m| m[i]);
        if kink {
            excluded += 1;
            continue;
        }
        plus += dp[i].abs();
        minus += dm[i].abs();
        seed[i] = sign(d0[i]) / norm;
    }
    let active = d0.len() - excluded;
    let fd = (plus - minus) / norm / (2.0 * h);
    let analytic = if active > 0 { vjp(seed)?.dot(v) } else { 0.0 };
    Ok(DirectionCheck {
        finite_difference: fd,
        analytic,
        rel_error: relative_error(fd, analytic),
        excluded,
        active,
    })
}

/// Finite-difference checks of the rec, det and desc terms with respect to
/// `x`, in that order, compared against `reference`.
pub fn check_loss_terms(
    reference: &GrayImage,
    x: &GrayImage,
    scales: &[ScaleSpec],
    luts: &[DescriptorLut],
    v: &GrayImage,
    h: f64,
) -> Result<Vec<DirectionCheck>> {
    reference.ensure_same_shape(x)?;
    check_luts(scales, luts)?;
    let (ih, iw) = x.shape();
    let n = x.len();
    let split = |seed: &[f64], per: usize, i: usize| seed[i * per..(i + 1) * per].to_vec();

    let rec = check_l1_term(
        &|img| Ok(img.as_slice().to_vec()),
        reference.as_slice(),
        n as f64,
        x,
        v,
        h,
        None,
        &|seed| Ok(GrayImage::from_vec_unchecked(ih, iw, seed)),
    )?;

    let det_norm = (n * scales.len()) as f64;
    let det = check_l1_term(
        &|img| det_stack(img, scales),
        &det_stack(reference, scales)?,
        det_norm,
        x,
        v,
        h,
        None,
        &|seed| {
            let mut acc = vec![0.0; n];
            for (i, spec) in scales.iter().enumerate() {
                let g = detector_vjp(x, spec, &CotangentMap::new(1, ih, iw, split(&seed, n, i))?)?;
                acc.iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
            }
            Ok(GrayImage::from_vec_unchecked(ih, iw, acc))
        },
    )?;

    // Haar kinks of x are removed from the direction; near-zero descriptor
    // norms are removed from the compared elements.
    let mut v_desc = v.clone();
    let mut masked_pixels = 0;
    for lut in luts {
        masked_pixels += mask_haar_kinks(x, &mut v_desc, lut.step, h)?;
    }
    let per = CHANNELS * n;
    let mut degenerate = vec![false; per * scales.len()];
    for probe in [
        x.clone(),
        x.add_scaled(h, &v_desc)?,
        x.add_scaled(-h, &v_desc)?,
    ] {
        for (i, lut) in luts.iter().enumerate() {
            let norms = forward_fast(&probe, lut).norms;
            for (p, &nrm) in norms.iter().enumerate() {
                if nrm < KINK_EPS {
                    for c in 0..CHANNELS {
                        degenerate[i * per + c * n + p] = true;
                    }
                }
            }
        }
    }
    let mut desc = check_l1_term(
        &|img| desc_stack(img, scales, luts),
        &desc_stack(reference, scales, luts)?,
        (per * scales.len()) as f64,
        x,
        &v_desc,
        h,
        Some(&degenerate),
        &|seed| {
            let mut acc = vec![0.0; n];
            for (i, (spec, lut)) in scales.iter().zip(luts).enumerate() {
                let cot = CotangentMap::new(CHANNELS, ih, iw, split(&seed, per, i))?;
                let g = descriptor_vjp(x, spec, lut, &cot)?;
                acc.iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
            }
            Ok(GrayImage::from_vec_unchecked(ih, iw, acc))
        },
    )?;
    desc.excluded += masked_pixels;
    Ok(vec![rec, det, desc])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(h: usize, w: usize, data: &[f64]) -> ScoreMap {
        ScoreMap::new(h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn adversarial_terms() {
        assert_eq!(adv_loss(&ScoreMap::filled(3, 4, 1.0).unwrap()), 0.0);
        assert_eq!(adv_loss(&ScoreMap::filled(3, 4, 0.0).unwrap()), 1.0);
        assert_eq!(adv_loss(&score(2, 2, &[1.0, 0.0, 0.5, 1.0])), 0.3125);
    }

    #[test]
    fn discriminator_terms() {
        let ones = ScoreMap::filled(2, 3, 1.0).unwrap();
        let zeros = ScoreMap::filled(2, 3, 0.0).unwrap();
        let halves = ScoreMap::filled(2, 3, 0.5).unwrap();
        assert_eq!(disc_loss(&ones, &zeros).unwrap(), 0.0);
        assert_eq!(disc_loss(&zeros, &ones).unwrap(), 2.0);
        assert_eq!(disc_loss(&halves, &halves).unwrap(), 0.5);
        assert!(disc_loss(&ones, &ScoreMap::filled(3, 2, 1.0).unwrap()).is_err());
    }

    #[test]
    fn score_map_follows_image_eighths() {
        let s = ScoreMap::for_image(64, 48, vec![0.0; 48]).unwrap();
        assert_eq!(s.shape(), (8, 6));
        assert!(ScoreMap::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn adv_grad_matches_derivative() {
        let s = score(1, 2, &[0.25, 2.0]);
        let g = adv_loss_grad(&s);
        assert_eq!(g.as_slice(), &[2.0 * -0.75 / 2.0, 2.0 * 1.0 / 2.0]);
    }

    #[test]
    fn reconstruction_loss() {
        let a = GrayImage::from_fn(4, 4, |y, x| (y + x) as f64 / 8.0).unwrap();
        assert_eq!(rec_loss(&a, &a).unwrap(), 0.0);
        let b = a.affine(1.0, 0.25).unwrap();
        assert!((rec_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert!(rec_loss(&a, &GrayImage::zeros(4, 5).unwrap()).is_err());
    }

    #[test]
    fn rec_gradient_is_scaled_sign() {
        let a = GrayImage::new(1, 4, vec![0.0, 0.5, 1.0, 0.2]).unwrap();
        let b = GrayImage::new(1, 4, vec![0.1, 0.5, 0.3, 0.9]).unwrap();
        let w = LossWeights::default();
        let g = loss_grad(LossId::Rec, &a, &b, Wrt::First, &w, &[], &[]).unwrap();
        assert_eq!(g.as_slice(), &[-0.25, 0.0, 0.25, -0.25]);
        let g = loss_grad(LossId::Rec, &a, &a, Wrt::Second, &w, &[], &[]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(
            loss_grad(LossId::Adv, &a, &b, Wrt::First, &w, &[], &[]),
            Err(Error::InvalidLoss(_))
        ));
    }

    #[test]
    fn weights_defaults_and_totals() {
        let w = LossWeights::default();
        assert_eq!(
            (w.lambda_rec, w.lambda_det, w.lambda_desc, w.lambda_adv),
            (8.0, 2.0, 2.0, 1.0)
        );
        assert!((w.generator_total(0.1, 0.2, 0.3, 0.4) - 2.2).abs() < 1e-12);
        assert_eq!(w.generator_total(0.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(
            w.scaled(2.0).generator_total(0.1, 0.2, 0.3, 0.4),
            2.0 * w.generator_total(0.1, 0.2, 0.3, 0.4)
        );
        assert!(LossWeights::new(1.0, -0.5, 1.0, 1.0).is_err());
    }
}
