//! Wall-clock comparison of the fast and naive dense descriptor paths.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::descriptor::{build_lut, dense_descriptors_fast, dense_descriptors_naive};
use crate::detector::ScaleSpec;
use crate::error::Result;
use crate::image::GrayImage;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub filter_size: usize,
    pub step: usize,
    pub height: usize,
    pub width: usize,
    pub fast_ms: f64,
    pub naive_ms: f64,
    pub speedup: f64,
    pub max_abs_diff: f64,
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> T) -> (T, f64) {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let v = f();
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
        out = Some(v);
    }
    (out.expect("at least one repeat"), best)
}

/// Times both paths per scale, keeping the fastest of `repeats` runs. Runs
/// in whatever rayon pool the caller installs.
pub fn run_bench(img: &GrayImage, scales: &[ScaleSpec], repeats: usize) -> Vec<BenchRow> {
    scales
        .iter()
        .map(|spec| {
            let lut = build_lut(spec);
            let (fast, fast_ms) = best_of(repeats, || dense_descriptors_fast(img, spec, &lut));
            let (naive, naive_ms) = best_of(repeats, || dense_descriptors_naive(img, spec, &lut));
            BenchRow {
                filter_size: spec.filter_size(),
                step: spec.step(),
                height: img.height(),
                width: img.width(),
                fast_ms,
                naive_ms,
                speedup: naive_ms / fast_ms,
                max_abs_diff: fast.max_abs_diff(&naive),
            }
        })
        .collect()
}

pub fn write_bench_csv<W: Write>(writer: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
