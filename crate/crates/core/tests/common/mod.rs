//! Independent brute-force references shared by the integration tests.
#![allow(dead_code)]

use dsurf::detector::{Keypoint, ResponsePyramid};
use dsurf::image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_img(seed: u64, h: usize, w: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn rand_signed(seed: u64, h: usize, w: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::new(
        h,
        w,
        (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Sum of in-image pixels inside the rectangle.
pub fn brute_box_sum(img: &GrayImage, row: isize, col: isize, h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for y in row..row + h as isize {
        for x in col..col + w as isize {
            if y >= 0 && x >= 0 && (y as usize) < img.height() && (x as usize) < img.width() {
                s += img.get(y as usize, x as usize);
            }
        }
    }
    s
}

/// Weight of the L×L Hessian box approximation at offset `(dy, dx)` from
/// the centre, written out from the textbook layout.
pub fn hessian_weight(filter_size: usize, which: &str, dy: isize, dx: isize) -> f64 {
    let l = (filter_size / 3) as isize;
    let half = (filter_size / 2) as isize;
    let norm = (filter_size * filter_size) as f64;
    let lobes = |along: isize, across: isize| -> f64 {
        if across.abs() > l - 1 || along.abs() > half {
            return 0.0;
        }
        // three bands of width l along the derivative axis: +1, −2, +1
        if along < -half + l {
            1.0
        } else if along < -half + 2 * l {
            -2.0
        } else {
            1.0
        }
    };
    let w = match which {
        "xx" => lobes(dx, dy),
        "yy" => lobes(dy, dx),
        "xy" => {
            let inside = |v: isize| (1..=l).contains(&v.abs());
            if inside(dy) && inside(dx) {
                if (dy > 0) == (dx > 0) {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            }
        }
        _ => unreachable!(),
    };
    w / norm
}

/// Zero-padded dense correlation with `weight(dy, dx)` over `[-r, r]²`.
pub fn dense_filter(img: &GrayImage, r: isize, weight: impl Fn(isize, isize) -> f64) -> GrayImage {
    let (h, w) = img.shape();
    GrayImage::from_fn(h, w, |y, x| {
        let mut s = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    s += weight(dy, dx) * img.get(yy as usize, xx as usize);
                }
            }
        }
        s
    })
    .unwrap()
}

/// Lxx, Lyy, Lxy and the determinant by dense convolution.
pub fn dense_hessian(img: &GrayImage, filter_size: usize) -> [GrayImage; 4] {
    let r = (filter_size / 2) as isize;
    let lxx = dense_filter(img, r, |dy, dx| hessian_weight(filter_size, "xx", dy, dx));
    let lyy = dense_filter(img, r, |dy, dx| hessian_weight(filter_size, "yy", dy, dx));
    let lxy = dense_filter(img, r, |dy, dx| hessian_weight(filter_size, "xy", dy, dx));
    let det = GrayImage::new(
        img.height(),
        img.width(),
        (0..img.len())
            .map(|i| lxx.as_slice()[i] * lyy.as_slice()[i] - 0.81 * lxy.as_slice()[i].powi(2))
            .collect(),
    )
    .unwrap();
    [lxx, lyy, lxy, det]
}

/// X and Y Haar responses of side `2s` read through clamped coordinates
/// from the mean-removed image.
pub fn haar_oracle(img: &GrayImage, s: usize) -> (GrayImage, GrayImage) {
    let (h, w) = img.shape();
    let mean = img.as_slice().iter().sum::<f64>() / img.len() as f64;
    let si = s as isize;
    let norm = 1.0 / (4 * s * s) as f64;
    let at = |y: usize, x: usize| {
        let (mut rx, mut ry) = (0.0, 0.0);
        for dy in -si..si {
            for dx in -si..si {
                let v = img.get_clamped(y as isize + dy, x as isize + dx) - mean;
                rx += if dx >= 0 { v } else { -v };
                ry += if dy >= 0 { v } else { -v };
            }
        }
        (rx * norm, ry * norm)
    };
    let dx = GrayImage::from_fn(h, w, |y, x| at(y, x).0).unwrap();
    let dy = GrayImage::from_fn(h, w, |y, x| at(y, x).1).unwrap();
    (dx, dy)
}

/// Exhaustive 3×3×3 non-maximum suppression over the det maps.
pub fn brute_nms(pyr: &ResponsePyramid, threshold: f64) -> Vec<Keypoint> {
    let (h, w) = pyr.shape();
    let mut out = Vec::new();
    for s in 0..pyr.len() {
        let r = pyr.scales()[s].radius();
        let det = pyr.det(s);
        for y in 0..h {
            for x in 0..w {
                if y < r || x < r || y + r >= h || x + r >= w {
                    continue;
                }
                let v = det.get(y, x);
                if v <= threshold {
                    continue;
                }
                let mut is_max = true;
                for ds in -1isize..=1 {
                    let t = s as isize + ds;
                    if t < 0 || t >= pyr.len() as isize {
                        continue;
                    }
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            if ds == 0 && dy == 0 && dx == 0 {
                                continue;
                            }
                            let (yy, xx) = (y as isize + dy, x as isize + dx);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            if pyr.det(t as usize).get(yy as usize, xx as usize) >= v {
                                is_max = false;
                            }
                        }
                    }
                }
                if is_max {
                    let lv = &pyr.levels()[s];
                    let lap = lv.lxx.get(y, x) + lv.lyy.get(y, x);
                    out.push(Keypoint {
                        x,
                        y,
                        scale_index: s,
                        response: v,
                        laplacian_sign: if lap >= 0.0 { 1 } else { -1 },
                    });
                }
            }
        }
    }
    out
}

fn gauss(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        / (2.0 * std::f64::consts::PI * sigma * sigma)
}

/// Unnormalised-box Haar pair at pixel `(row, col)` of side `size`, with
/// truncated boxes at the border.
fn classic_haar(img: &GrayImage, row: isize, col: isize, size: isize) -> (f64, f64) {
    let half = size / 2;
    let b =
        |r: isize, c: isize, h: isize, w: isize| brute_box_sum(img, r, c, h as usize, w as usize);
    let hx = b(row - half, col, size, half) - b(row - half, col - half, size, half);
    let hy = b(row, col - half, half, size) - b(row - half, col - half, half, size);
    (hx, hy)
}

/// Upright SURF descriptor at one point, written as the textbook sampling
/// loop: 4×4 subregions at centres (−7.5, −2.5, 2.5, 7.5)·s, each summing a
/// 9×9 grid of Haar samples spaced `s` apart under a σ = 2.5s Gaussian about
/// the subregion centre, then a σ = 1.5 Gaussian over subregions.
///
/// Channels come out in the library order (subregion row-major, then
/// Σdx, Σdy, Σ|dx|, Σ|dy|).
pub fn usurf_reference(img: &GrayImage, y: usize, x: usize, s: usize) -> [f64; 64] {
    let sf = s as f64;
    let grid = [-1.5, -0.5, 0.5, 1.5];
    let mut desc = [0.0; 64];
    for (a, gy) in grid.iter().enumerate() {
        for (b, gx) in grid.iter().enumerate() {
            let cy = (gy * 5.0 * sf).round();
            let cx = (gx * 5.0 * sf).round();
            let mut acc = [0.0; 4];
            for i in -4..=4 {
                for j in -4..=4 {
                    let (oy, ox) = (i as f64 * sf, j as f64 * sf);
                    let sy = (y as f64 + cy + oy).clamp(0.0, (img.height() - 1) as f64) as isize;
                    let sx = (x as f64 + cx + ox).clamp(0.0, (img.width() - 1) as f64) as isize;
                    let g = gauss(ox, oy, 2.5 * sf);
                    let (hx, hy) = classic_haar(img, sy, sx, 2 * s as isize);
                    acc[0] += g * hx;
                    acc[1] += g * hy;
                    acc[2] += (g * hx).abs();
                    acc[3] += (g * hy).abs();
                }
            }
            let g2 = gauss(*gx, *gy, 1.5);
            for c in 0..4 {
                desc[(a * 4 + b) * 4 + c] = g2 * acc[c];
            }
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        desc.iter_mut().for_each(|v| *v /= norm);
    }
    desc
}

/// OpenSURF's upright `getDescriptor` loop transcribed: sample positions
/// follow the continuous scale σ rather than the integer step, the
/// subregion grid is the reference implementation's asymmetric one, and
/// the subregion loop runs x-major.
pub fn opensurf_upright(img: &GrayImage, y: usize, x: usize, sigma: f64) -> [f64; 64] {
    let (xf, yf) = (x as f64, y as f64);
    let size = 2 * sigma.round() as isize;
    let mut desc = [0.0; 64];
    let mut count = 0;
    let mut i: isize = -8;
    let mut cx = -0.5;
    while i < 12 {
        let mut j: isize = -8;
        i -= 4;
        cx += 1.0;
        let mut cy = -0.5;
        while j < 12 {
            cy += 1.0;
            j -= 4;
            let ix = (i + 5) as f64;
            let jx = (j + 5) as f64;
            let xs = (xf + ix * sigma).round();
            let ys = (yf + jx * sigma).round();
            let mut acc = [0.0; 4];
            for k in i..i + 9 {
                for l in j..j + 9 {
                    let sample_x = (xf + k as f64 * sigma).round();
                    let sample_y = (yf + l as f64 * sigma).round();
                    let g = gauss(xs - sample_x, ys - sample_y, 2.5 * sigma);
                    let (rx, ry) = classic_haar(img, sample_y as isize, sample_x as isize, size);
                    acc[0] += g * rx;
                    acc[1] += g * ry;
                    acc[2] += (g * rx).abs();
                    acc[3] += (g * ry).abs();
                }
            }
            let g2 = gauss(cx - 2.0, cy - 2.0, 1.5);
            for c in 0..4 {
                desc[count * 4 + c] = g2 * acc[c];
            }
            count += 1;
            j += 9;
        }
        i += 9;
    }
    // count runs x-major; reorder to subregion-row-major
    let mut out = [0.0; 64];
    for xi in 0..4 {
        for yi in 0..4 {
            for c in 0..4 {
                out[(yi * 4 + xi) * 4 + c] = desc[(xi * 4 + yi) * 4 + c];
            }
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
