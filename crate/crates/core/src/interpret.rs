//! Attention maps as images: extraction, min-max normalisation, bilinear
//! upscaling, heat overlays and box-mass statistics.

use std::io::Write;
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::flarenet::AttentionBundle;
use crate::heliodata::{write_ppm, BBox};
use crate::ndtensor::{bilinear_resize, Tensor};

/// Estimator exported when none is requested.
pub const DEFAULT_ESTIMATOR: usize = 2;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Square attention grid of one sample, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// One-based estimator index.
    pub estimator: usize,
    /// Batch position of the source sample.
    pub sample: usize,
    pub side: usize,
    pub values: Vec<f32>,
}

impl AttentionMap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.side + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }
}

/// Raw softmax weights of `estimator` for batch position `sample`.
pub fn extract(bundle: &AttentionBundle, estimator: usize, sample: usize) -> Result<AttentionMap> {
    let est = bundle.estimator(estimator)?;
    if sample >= est.batch {
        return Err(Error::Index(format!("sample {sample} outside a batch of {}", est.batch)));
    }
    Ok(AttentionMap { estimator, sample, side: est.side, values: est.weights_of(sample).to_vec() })
}

/// Min-max scaling to [0, 1]. A constant grid becomes all zeros.
pub fn normalize(map: &AttentionMap) -> AttentionMap {
    let lo = map.values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let values = if range > 0.0 {
        map.values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; map.values.len()]
    };
    AttentionMap { values, ..map.clone() }
}

/// Corner-aligned bilinear resize to `side x side`.
pub fn upscale(map: &AttentionMap, side: usize) -> Result<AttentionMap> {
    let grid = Tensor::new(&[map.side, map.side], map.values.clone())?;
    let out = bilinear_resize(&grid, side, side)?;
    Ok(AttentionMap { side, values: out.into_data(), ..map.clone() })
}

/// Dark-to-bright amber ramp: `(255 v, 160 v, 32 v)` rounded, `v` clamped to [0, 1].
pub fn heat_color(v: f32) -> [u8; 3] {
    let v = f64::from(v.clamp(0.0, 1.0));
    [(255.0 * v).round() as u8, (160.0 * v).round() as u8, (32.0 * v).round() as u8]
}

/// `round((1 - alpha) * base + alpha * heat)` per channel, with the gray base
/// replicated into all three channels.
pub fn overlay(base: &GrayImage, heat: &AttentionMap, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    let (w, h) = base.dimensions();
    if w as usize != heat.side || h as usize != heat.side {
        return Err(Error::Dimension(format!("image is {w}x{h}, heat map is {0}x{0}", heat.side)));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let b = f64::from(base.get_pixel(x, y)[0]);
        let c = heat_color(heat.get(y as usize, x as usize));
        Rgb(c.map(|c| ((1.0 - alpha) * b + alpha * f64::from(c)).round() as u8))
    }))
}

/// Raw map sidecar: `side=<n>\n` then `n*n` little-endian f32 values.
pub fn sidecar_bytes(map: &AttentionMap) -> Vec<u8> {
    let mut out = format!("side={}\n", map.side).into_bytes();
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_sidecar(bytes: &[u8]) -> Result<Vec<f32>> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("sidecar has no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("sidecar header is not UTF-8".into()))?;
    let side: usize = header
        .strip_prefix("side=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad sidecar header {header:?}")))?;
    let body = &bytes[nl + 1..];
    if body.len() != 4 * side * side {
        return Err(Error::Format(format!("sidecar holds {} bytes, side {side} needs {}", body.len(), 4 * side * side)));
    }
    Ok(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

/// Writes the overlay raster (PPM) and the raw-map sidecar.
pub fn write_overlay(raster: &Path, sidecar: &Path, image: &RgbImage, raw: &AttentionMap) -> Result<()> {
    write_ppm(raster, image)?;
    let mut f = std::fs::File::create(sidecar).map_err(|e| Error::io(sidecar, e))?;
    f.write_all(&sidecar_bytes(raw)).map_err(|e| Error::io(sidecar, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxMass {
    /// Attention mass inside the box.
    pub mass: f64,
    /// Box area over image area, after clipping to the image.
    pub area_fraction: f64,
    /// `mass / area_fraction`; 1 for a uniform map.
    pub ratio: f64,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Mass of a unit-mass `map` inside each box given in `image_side`
/// coordinates. Each map cell contributes in proportion to the fraction of
/// its area the scaled box covers.
pub fn attention_locality(map: &AttentionMap, image_side: usize, boxes: &[BBox]) -> Result<Vec<BoxMass>> {
    let full = image_side as f64;
    let scale = map.side as f64 / full;
    boxes
        .iter()
        .map(|b| {
            let clipped = BBox { x0: b.x0.max(0.0), y0: b.y0.max(0.0), x1: b.x1.min(full), y1: b.y1.min(full) };
            if !(clipped.area() > 0.0) {
                return Err(Error::Geometry(format!("box {b:?} is empty inside a {image_side} image")));
            }
            let (x0, x1, y0, y1) = (clipped.x0 * scale, clipped.x1 * scale, clipped.y0 * scale, clipped.y1 * scale);
            let mut mass = 0.0;
            for row in (y0.floor() as usize)..(y1.ceil() as usize).min(map.side) {
                let fy = overlap(row as f64, row as f64 + 1.0, y0, y1);
                for col in (x0.floor() as usize)..(x1.ceil() as usize).min(map.side) {
                    mass += f64::from(map.get(row, col)) * fy * overlap(col as f64, col as f64 + 1.0, x0, x1);
                }
            }
            let area_fraction = clipped.area() / (full * full);
            Ok(BoxMass { mass, area_fraction, ratio: mass / area_fraction })
        })
        .collect()
}
