//! Sparse descriptor matching and RANSAC homography verification, plus an
//! end-to-end detect → describe → match → verify pass over an image pair.

use std::time::Instant;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{build_lut, dense_descriptors_fast, describe_keypoints, Descriptor};
use crate::detector::{default_scales, detector_response, extract_keypoints, Keypoint, ScaleSpec};
use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    /// L2 distance to the nearest neighbour.
    pub distance: f64,
    /// Nearest over second-nearest distance.
    pub ratio: f64,
}

/// Nearest-neighbour matching with Lowe's ratio test.
///
/// Only keypoints with equal Laplacian sign are compared. Equal distances
/// resolve to the lower `b` index. A query with fewer than two candidates
/// is ambiguous and produces no match.
pub fn match_descriptors(
    desc_a: &[Descriptor],
    desc_b: &[Descriptor],
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    ratio_threshold: f64,
) -> Result<Vec<Match>> {
    if desc_a.len() != kps_a.len() || desc_b.len() != kps_b.len() {
        return Err(Error::InvalidConfig(
            "descriptor and keypoint lists differ in length".into(),
        ));
    }
    let matches = desc_a
        .par_iter()
        .zip(kps_a)
        .enumerate()
        .filter_map(|(i, (da, ka))| {
            let mut best: Option<(f64, usize)> = None;
            let mut second = f64::INFINITY;
            for (j, (db, kb)) in desc_b.iter().zip(kps_b).enumerate() {
                if ka.laplacian_sign != kb.laplacian_sign {
                    continue;
                }
                let d = da.distance(db);
                match best {
                    Some((bd, _)) if d >= bd => second = second.min(d),
                    Some((bd, _)) => {
                        second = bd;
                        best = Some((d, j));
                    }
                    None => best = Some((d, j)),
                }
            }
            let (d1, j) = best?;
            if !second.is_finite() {
                return None;
            }
            let ratio = if second > 0.0 { d1 / second } else { 1.0 };
            (ratio < ratio_threshold).then_some(Match {
                index_a: i,
                index_b: j,
                distance: d1,
                ratio,
            })
        })
        .collect();
    Ok(matches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier bound on the symmetric transfer error, in pixels.
    pub threshold: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            max_iters: 2000,
            confidence: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    /// Row-major homography from image A to image B with `h33 = 1`.
    pub model: [f64; 9],
    /// Indices into the correspondence (match) list.
    pub inliers: Vec<usize>,
    pub inlier_count: usize,
    pub rms_residual: f64,
    pub iterations: usize,
}

impl VerificationResult {
    pub fn homography(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.model)
    }
}

fn project(h: &Matrix3<f64>, p: &Point2<f64>) -> Point2<f64> {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

/// `‖b − H·a‖ + ‖a − H⁻¹·b‖`.
pub fn symmetric_transfer_error(
    h: &Matrix3<f64>,
    h_inv: &Matrix3<f64>,
    a: &Point2<f64>,
    b: &Point2<f64>,
) -> f64 {
    let e = (b - project(h, a)).norm() + (a - project(h_inv, b)).norm();
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Similarity taking the points to zero centroid and mean distance √2.
fn normalising_transform(points: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist <= f64::EPSILON {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(
        s,
        0.0,
        -s * cx,
        0.0,
        s,
        -s * cy,
        0.0,
        0.0,
        1.0,
    ))
}

/// Normalised DLT over ≥ 4 correspondences, scaled to `h33 = 1`.
pub fn dlt_homography(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return None;
    }
    let t_src = normalising_transform(src)?;
    let t_dst = normalising_transform(dst)?;
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let p = project(&t_src, p);
        let q = project(&t_dst, q);
        let (r0, r1) = (2 * i, 2 * i + 1);
        a[(r0, 0)] = -p.x;
        a[(r0, 1)] = -p.y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = q.x * p.x;
        a[(r0, 7)] = q.x * p.y;
        a[(r0, 8)] = q.x;
        a[(r1, 3)] = -p.x;
        a[(r1, 4)] = -p.y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = q.y * p.x;
        a[(r1, 7)] = q.y * p.y;
        a[(r1, 8)] = q.y;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = v_t.row(idx);
    let hn = Matrix3::from_row_slice(&[h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]]);
    let h = t_dst.try_inverse()? * hn * t_src;
    if h[(2, 2)].abs() < 1e-12 {
        return None;
    }
    let h = h / h[(2, 2)];
    h.iter().all(|v| v.is_finite()).then_some(h)
}

fn triangle_area2(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> f64 {
    ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs()
}

fn has_collinear_triple(points: &[Point2<f64>]) -> bool {
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            for k in j + 1..points.len() {
                if triangle_area2(&points[i], &points[j], &points[k]) < 1e-6 {
                    return true;
                }
            }
        }
    }
    false
}

/// True when every point lies within `tol` pixels of one line.
fn all_collinear(points: &[Point2<f64>], tol: f64) -> bool {
    if points.len() < 3 {
        return true;
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - cx, p.y - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    // smallest eigenvalue of the scatter matrix is the squared residual
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let min_eig = tr / 2.0 - ((tr * tr / 4.0 - det).max(0.0)).sqrt();
    (min_eig / n).sqrt() < tol
}

fn score(
    h: &Matrix3<f64>,
    a: &[Point2<f64>],
    b: &[Point2<f64>],
    threshold: f64,
) -> Option<(Vec<usize>, f64)> {
    let h_inv = h.try_inverse()?;
    let mut inliers = Vec::new();
    let mut sq = 0.0;
    for (i, (pa, pb)) in a.iter().zip(b).enumerate() {
        let e = symmetric_transfer_error(h, &h_inv, pa, pb);
        if e <= threshold {
            inliers.push(i);
            sq += e * e;
        }
    }
    let rms = if inliers.is_empty() {
        f64::INFINITY
    } else {
        (sq / inliers.len() as f64).sqrt()
    };
    Some((inliers, rms))
}

fn better(candidate: &(Vec<usize>, f64), best: &Option<(Matrix3<f64>, Vec<usize>, f64)>) -> bool {
    match best {
        None => true,
        Some((_, inl, rms)) => {
            candidate.0.len() > inl.len() || (candidate.0.len() == inl.len() && candidate.1 < *rms)
        }
    }
}

/// Robust homography from point correspondences `a[i] ↔ b[i]`.
pub fn ransac_homography(
    a: &[Point2<f64>],
    b: &[Point2<f64>],
    params: &RansacParams,
) -> Result<VerificationResult> {
    let n = a.len();
    if n < 4 || b.len() != n {
        return Err(Error::InsufficientMatches {
            needed: 4,
            got: n.min(b.len()),
        });
    }
    let valid = params.threshold > 0.0 && params.confidence > 0.0 && params.confidence < 1.0;
    if !valid {
        return Err(Error::InvalidConfig(
            "ransac threshold must be positive and confidence in (0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Matrix3<f64>, Vec<usize>, f64)> = None;
    let mut needed = params.max_iters;
    let mut iterations = 0;
    while iterations < needed.min(params.max_iters) {
        iterations += 1;
        let sample = rand::seq::index::sample(&mut rng, n, 4).into_vec();
        let sa: Vec<_> = sample.iter().map(|&i| a[i]).collect();
        let sb: Vec<_> = sample.iter().map(|&i| b[i]).collect();
        if has_collinear_triple(&sa) || has_collinear_triple(&sb) {
            continue;
        }
        let Some(h) = dlt_homography(&sa, &sb) else {
            continue;
        };
        let Some(scored) = score(&h, a, b, params.threshold) else {
            continue;
        };
        if better(&scored, &best) {
            let w = scored.0.len() as f64 / n as f64;
            best = Some((h, scored.0, scored.1));
            let denom = (1.0 - w.powi(4)).ln();
            needed = if w >= 1.0 {
                0
            } else if denom < 0.0 {
                ((1.0 - params.confidence).ln() / denom).ceil().max(1.0) as usize
            } else {
                params.max_iters
            };
        }
    }
    let Some((mut model, mut inliers, mut rms)) = best else {
        return Err(Error::DegenerateConfiguration);
    };
    if inliers.len() < 4 {
        return Err(Error::DegenerateConfiguration);
    }

    // least-squares refit on the consensus set until it stops improving
    for _ in 0..10 {
        let ia: Vec<_> = inliers.iter().map(|&i| a[i]).collect();
        let ib: Vec<_> = inliers.iter().map(|&i| b[i]).collect();
        let Some(refit) = dlt_homography(&ia, &ib) else {
            break;
        };
        let Some(scored) = score(&refit, a, b, params.threshold) else {
            break;
        };
        let improved =
            scored.0.len() > inliers.len() || (scored.0.len() == inliers.len() && scored.1 < rms);
        if !improved {
            break;
        }
        model = refit;
        (inliers, rms) = scored;
    }

    let pa: Vec<_> = inliers.iter().map(|&i| a[i]).collect();
    let pb: Vec<_> = inliers.iter().map(|&i| b[i]).collect();
    if all_collinear(&pa, 1e-3) || all_collinear(&pb, 1e-3) {
        return Err(Error::DegenerateConfiguration);
    }
    let mut flat = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            flat[3 * r + c] = model[(r, c)];
        }
    }
    Ok(VerificationResult {
        model: flat,
        inlier_count: inliers.len(),
        inliers,
        rms_residual: rms,
        iterations,
    })
}

fn keypoint_point(kp: &Keypoint) -> Point2<f64> {
    Point2::new(kp.x as f64, kp.y as f64)
}

/// RANSAC over matched keypoint locations; inlier indices refer to `matches`.
pub fn ransac_verify(
    matches: &[Match],
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    params: &RansacParams,
) -> Result<VerificationResult> {
    if matches.len() < 4 {
        return Err(Error::InsufficientMatches {
            needed: 4,
            got: matches.len(),
        });
    }
    let lookup = |kps: &[Keypoint], i: usize| -> Result<Point2<f64>> {
        kps.get(i)
            .map(keypoint_point)
            .ok_or(Error::KeypointOutOfRange { index: i })
    };
    let a = matches
        .iter()
        .map(|m| lookup(kps_a, m.index_a))
        .collect::<Result<Vec<_>>>()?;
    let b = matches
        .iter()
        .map(|m| lookup(kps_b, m.index_b))
        .collect::<Result<Vec<_>>>()?;
    ransac_homography(&a, &b, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub scales: Vec<ScaleSpec>,
    pub detection_threshold: f64,
    pub ratio_threshold: f64,
    pub ransac: RansacParams,
    /// Verification fails below this many inliers.
    pub min_inliers: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            scales: default_scales(),
            detection_threshold: 4e-4,
            ratio_threshold: 0.8,
            ransac: RansacParams::default(),
            min_inliers: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub matches: usize,
    pub inliers: usize,
    pub rms_residual: Option<f64>,
    pub model: Option<[f64; 9]>,
    pub verified: bool,
}

/// Wall-clock milliseconds per stage; kept apart from [`PairReport`] so the
/// report stays byte-stable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub detect_ms: f64,
    pub describe_ms: f64,
    pub match_ms: f64,
    pub verify_ms: f64,
}

/// Everything [`evaluate_pair`] computed, for reporting and visualisation.
#[derive(Debug, Clone)]
pub struct PairEvaluation {
    pub report: PairReport,
    pub timings: StageTimings,
    pub keypoints_a: Vec<Keypoint>,
    pub keypoints_b: Vec<Keypoint>,
    pub matches: Vec<Match>,
    pub verification: Option<VerificationResult>,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Keypoints and their descriptors, one dense map at a time.
pub fn detect_and_describe(
    img: &GrayImage,
    scales: &[ScaleSpec],
    threshold: f64,
) -> Result<(Vec<Keypoint>, Vec<Descriptor>, f64, f64)> {
    let t = Instant::now();
    let pyr = detector_response(img, scales)?;
    let kps = extract_keypoints(&pyr, threshold);
    drop(pyr);
    let detect_ms = elapsed_ms(t);

    let t = Instant::now();
    let mut descs: Vec<Option<Descriptor>> = vec![None; kps.len()];
    for (s, spec) in scales.iter().enumerate() {
        let idx: Vec<usize> = (0..kps.len())
            .filter(|&i| kps[i].scale_index == s)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mut map = dense_descriptors_fast(img, spec, &build_lut(spec));
        map.scale_index = s;
        let sub: Vec<Keypoint> = idx.iter().map(|&i| kps[i]).collect();
        for (i, d) in idx
            .into_iter()
            .zip(describe_keypoints(std::slice::from_ref(&map), &sub)?)
        {
            descs[i] = Some(d);
        }
    }
    let descs = descs
        .into_iter()
        .map(|d| d.expect("every scale described"))
        .collect();
    Ok((kps, descs, detect_ms, elapsed_ms(t)))
}

/// Detect, describe, match and verify an image pair.
pub fn evaluate_pair(
    img_a: &GrayImage,
    img_b: &GrayImage,
    config: &PairConfig,
) -> Result<PairEvaluation> {
    let (kps_a, desc_a, det_a, des_a) =
        detect_and_describe(img_a, &config.scales, config.detection_threshold)?;
    let (kps_b, desc_b, det_b, des_b) =
        detect_and_describe(img_b, &config.scales, config.detection_threshold)?;

    let t = Instant::now();
    let matches = match_descriptors(&desc_a, &desc_b, &kps_a, &kps_b, config.ratio_threshold)?;
    let match_ms = elapsed_ms(t);

    let t = Instant::now();
    let verification = match ransac_verify(&matches, &kps_a, &kps_b, &config.ransac) {
        Ok(v) => Some(v),
        Err(Error::InsufficientMatches { .. }) | Err(Error::DegenerateConfiguration) => None,
        Err(e) => return Err(e),
    };
    let verify_ms = elapsed_ms(t);

    let inliers = verification.as_ref().map_or(0, |v| v.inlier_count);
    let report = PairReport {
        keypoints_a: kps_a.len(),
        keypoints_b: kps_b.len(),
        matches: matches.len(),
        inliers,
        rms_residual: verification.as_ref().map(|v| v.rms_residual),
        model: verification.as_ref().map(|v| v.model),
        verified: verification.is_some() && inliers >= config.min_inliers,
    };
    Ok(PairEvaluation {
        report,
        timings: StageTimings {
            detect_ms: det_a + det_b,
            describe_ms: des_a + des_b,
            match_ms,
            verify_ms,
        },
        keypoints_a: kps_a,
        keypoints_b: kps_b,
        matches,
        verification,
    })
}

fn draw_line(canvas: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), colour: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < canvas.width() && (y as u32) < canvas.height() {
            canvas.put_pixel(x as u32, y as u32, colour);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Side-by-side rendering: inlier matches in green, rejected ones in red.
pub fn render_matches(img_a: &GrayImage, img_b: &GrayImage, eval: &PairEvaluation) -> RgbImage {
    let h = img_a.height().max(img_b.height()) as u32;
    let wa = img_a.width() as u32;
    let mut canvas = RgbImage::new(wa + img_b.width() as u32, h);
    for (img, x_off) in [(img_a, 0), (img_b, wa)] {
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v = (img.get(y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                canvas.put_pixel(x as u32 + x_off, y as u32, Rgb([v, v, v]));
            }
        }
    }
    let inliers: std::collections::HashSet<usize> = eval
        .verification
        .as_ref()
        .map(|v| v.inliers.iter().copied().collect())
        .unwrap_or_default();
    for (i, m) in eval.matches.iter().enumerate() {
        let ka = &eval.keypoints_a[m.index_a];
        let kb = &eval.keypoints_b[m.index_b];
        let colour = if inliers.contains(&i) {
            Rgb([40, 220, 60])
        } else {
            Rgb([220, 40, 40])
        };
        draw_line(
            &mut canvas,
            (ka.x as i64, ka.y as i64),
            (kb.x as i64 + wa as i64, kb.y as i64),
            colour,
        );
    }
    canvas
}
