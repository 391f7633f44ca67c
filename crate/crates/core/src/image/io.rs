use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use super::GrayImage;
use crate::error::{Error, Result};

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// Loads a PNG or binary PGM as intensities in `[0, 1]`. Colour input is
/// reduced with Rec.601 luma; alpha is ignored.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    }
    let decoded = reader.decode().map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    from_dynamic(&decoded)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    LUMA_R * r + LUMA_G * g + LUMA_B * b
}

fn from_dynamic(img: &DynamicImage) -> Result<GrayImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage {
            height: h,
            width: w,
        });
    }
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => {
            buf.as_raw().iter().map(|&v| v as f64 / 65535.0).collect()
        }
        DynamicImage::ImageLumaA16(buf) => buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        DynamicImage::ImageRgb8(buf) => buf
            .pixels()
            .map(|p| luma(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 255.0)
            .collect(),
        DynamicImage::ImageRgba8(buf) => buf
            .pixels()
            .map(|p| luma(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 255.0)
            .collect(),
        DynamicImage::ImageRgb16(buf) => buf
            .pixels()
            .map(|p| luma(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 65535.0)
            .collect(),
        DynamicImage::ImageRgba16(buf) => buf
            .pixels()
            .map(|p| luma(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64) / 65535.0)
            .collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| luma(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64))
            .collect(),
    };
    GrayImage::new(h, w, data)
}

/// Writes an 8-bit PNG or PGM (chosen by extension), clamping to `[0, 1]`.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => ImageFormat::Png,
        Some("pgm") | Some("pnm") => ImageFormat::Pnm,
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    };
    let bytes: Vec<u8> = img
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("buffer sized from image dimensions");
    buf.save_with_format(path, format)?;
    Ok(())
}
