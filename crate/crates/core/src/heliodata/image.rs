use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, GrayImage, ImageEncoder, ImageReader, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ndtensor::{bilinear_resize, Tensor};

/// Maps an 8-bit pixel to `[-1, 1]`.
pub fn normalize_pixel(p: u8) -> f32 {
    f32::from(p) / 127.5 - 1.0
}

/// Inverse of [`normalize_pixel`], rounding and clamping to 8 bits.
pub fn quantize_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Decodes an 8-bit single-channel image (PGM, or PNG when enabled).
pub fn decode_gray(bytes: &[u8], origin: &Path) -> Result<GrayImage> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| format_err(origin, e))?
        .decode()
        .map_err(|e| format_err(origin, e))?;
    match img.color() {
        ColorType::L8 => Ok(img.into_luma8()),
        other => Err(format_err(origin, format!("expected 8-bit grayscale, found {other:?}"))),
    }
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gray(&bytes, path)
}

fn encode_pnm(path: &Path, data: &[u8], w: u32, h: u32, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(data, w, h, color)
        .map_err(|e| format_err(path, e))?;
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    encode_pnm(
        path,
        img.as_raw(),
        img.width(),
        img.height(),
        PnmSubtype::Graymap(SampleEncoding::Binary),
        ExtendedColorType::L8,
    )
}

/// Writes a binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    encode_pnm(
        path,
        img.as_raw(),
        img.width(),
        img.height(),
        PnmSubtype::Pixmap(SampleEncoding::Binary),
        ExtendedColorType::Rgb8,
    )
}

/// `[1, S, S]` tensor of normalised pixels, bilinearly resized when the
/// source is not already `S x S`.
pub fn gray_to_tensor(img: &GrayImage, target_side: usize) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.as_raw().iter().copied().map(normalize_pixel).collect();
    let mut plane = Tensor::new(&[h, w], data)?;
    if (h, w) != (target_side, target_side) {
        plane = bilinear_resize(&plane, target_side, target_side)?;
    }
    plane.reshape(&[1, target_side, target_side])
}

pub fn load_image(path: &Path, target_side: usize) -> Result<Tensor<f32>> {
    gray_to_tensor(&read_gray(path)?, target_side)
}

/// Loads images in parallel on the current rayon pool; order follows `paths`.
pub fn load_images(paths: &[PathBuf], target_side: usize) -> Result<Vec<Tensor<f32>>> {
    paths.par_iter().map(|p| load_image(p, target_side)).collect()
}

/// Grayscale image from a `[1, H, W]` or `[H, W]` tensor in `[-1, 1]`.
pub fn tensor_to_gray(t: &Tensor<f32>) -> Result<GrayImage> {
    let shape = t.shape();
    let (h, w) = match shape {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(Error::Dimension(format!("expected [1, H, W] or [H, W], got {shape:?}"))),
    };
    let pixels = t.data().iter().copied().map(quantize_pixel).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer sized from shape"))
}
