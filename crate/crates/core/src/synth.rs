//! Deterministic synthetic images for fixtures, benchmarks and tests.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::GrayImage;

/// I.i.d. uniform `[0, 1)` pixels.
pub fn random_image(height: usize, width: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width).map(|_| rng.random::<f64>()).collect();
    GrayImage::from_vec_unchecked(height, width, data)
}

/// Isotropic Gaussian bump of the given amplitude on a zero background.
pub fn gaussian_blob(
    height: usize,
    width: usize,
    cy: f64,
    cx: f64,
    sigma: f64,
    amplitude: f64,
) -> GrayImage {
    let s2 = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            data.push(amplitude * (-d2 / s2).exp());
        }
    }
    GrayImage::from_vec_unchecked(height, width, data)
}

/// Textured scene: a smooth shading ramp plus bright and dark Gaussian
/// blobs of mixed sizes and a few flat rectangles, kept inside `(0, 1)`.
pub fn blob_scene(height: usize, width: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gy, gx) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let mut data: Vec<f64> = (0..height * width)
        .map(|i| {
            let (y, x) = (
                (i / width) as f64 / height as f64,
                (i % width) as f64 / width as f64,
            );
            0.45 + gy * (y - 0.5) + gx * (x - 0.5)
        })
        .collect();
    let area = (height * width) as f64;
    let blobs = (area / 300.0).round().max(6.0) as usize;
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let sigma: f64 = rng.random_range(1.2..5.0);
        let amp = rng.random_range(0.15..0.45) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let reach = (4.0 * sigma).ceil() as isize;
        let s2 = 2.0 * sigma * sigma;
        for y in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(height as isize) {
            for x in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(width as isize) {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                data[y as usize * width + x as usize] += amp * (-d2 / s2).exp();
            }
        }
    }
    for _ in 0..blobs / 6 {
        let h = rng.random_range(4..(height / 6).max(5));
        let w = rng.random_range(4..(width / 6).max(5));
        let y0 = rng.random_range(0..height.saturating_sub(h).max(1));
        let x0 = rng.random_range(0..width.saturating_sub(w).max(1));
        let delta = rng.random_range(-0.15..0.15);
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                data[y * width + x] += delta;
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.02, 0.98));
    GrayImage::from_vec_unchecked(height, width, data)
}

/// Resamples `img` so that output pixel `p` reads input `H⁻¹·p` (bilinear,
/// edge-clamped), i.e. the output is `img` moved by `homography`.
pub fn warp_homography(img: &GrayImage, homography: &Matrix3<f64>) -> Option<GrayImage> {
    let inv = homography.try_inverse()?;
    let (h, w) = img.shape();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = inv * Vector3::new(x as f64, y as f64, 1.0);
            let (sx, sy) = (p.x / p.z, p.y / p.z);
            data.push(bilinear(img, sy, sx));
        }
    }
    Some(GrayImage::from_vec_unchecked(h, w, data))
}

fn bilinear(img: &GrayImage, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let a = img.get_clamped(y0, x0);
    let b = img.get_clamped(y0, x0 + 1);
    let c = img.get_clamped(y0 + 1, x0);
    let d = img.get_clamped(y0 + 1, x0 + 1);
    (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
}
