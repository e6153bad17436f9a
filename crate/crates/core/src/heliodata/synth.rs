use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::catalog::{format_timestamp, Catalog, FlareEvent, Label};
use super::image::{quantize_pixel, write_pgm};
use super::manifest::{assign_partition, DatasetManifest, MagnetogramSample};
use crate::error::{Error, Result};

/// Axis-aligned box in full-resolution pixel coordinates, half-open:
/// `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    fn overlaps(&self, other: &BBox, gap: f64) -> bool {
        self.x0 < other.x1 + gap && other.x0 < self.x1 + gap && self.y0 < other.y1 + gap && other.y0 < self.y1 + gap
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    /// Fraction of FL samples; the FL count is `round(samples * fl_ratio)`.
    pub fl_ratio: f64,
    pub side: usize,
    /// Blobs per image, the driver included.
    pub blobs: usize,
    /// Standard deviation of the background noise in normalised units.
    pub noise_sigma: f64,
    /// Driver amplitude range on FL images.
    pub fl_amplitude: (f64, f64),
    /// Every blob on NF images, and every non-driver blob on FL images, stays
    /// at or below this amplitude.
    pub quiet_max_amplitude: f64,
    /// Lobe width as a fraction of the image side.
    pub sigma_fraction: (f64, f64),
    pub start: DateTime<Utc>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 1000,
            fl_ratio: 1.0 / 6.0,
            side: 64,
            blobs: 3,
            noise_sigma: 0.08,
            fl_amplitude: (0.7, 1.0),
            quiet_max_amplitude: 0.5,
            sigma_fraction: (1.0 / 32.0, 1.0 / 20.0),
            start: Utc.with_ymd_and_hms(2011, 1, 1, 0, 0, 0).single().expect("valid date"),
            seed: 0,
        }
    }
}

/// Hours between consecutive synthetic observations. Longer than the
/// labeling window so each generated event lands in exactly one window.
pub const SYNTH_SPACING_HOURS: i64 = 25;
/// Offset of each sample's generated event after its observation time.
const EVENT_OFFSET_MINUTES: i64 = 30;
const PLACEMENT_RETRIES: usize = 200;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.side < 32 {
            return bad(format!("synthetic side must be >= 32, got {}", self.side));
        }
        if self.samples == 0 || self.blobs == 0 {
            return bad("synthetic corpus needs at least one sample and one blob".into());
        }
        if !(0.0..=1.0).contains(&self.fl_ratio) {
            return bad(format!("fl_ratio {} outside [0, 1]", self.fl_ratio));
        }
        let (lo, hi) = self.fl_amplitude;
        if !(self.quiet_max_amplitude > 0.0 && lo > self.quiet_max_amplitude && hi >= lo) {
            return bad("FL driver amplitudes must lie strictly above quiet_max_amplitude".into());
        }
        let (slo, shi) = self.sigma_fraction;
        // a blob spans six sigma and must fit inside the image
        if !(slo > 0.0 && shi >= slo && shi < 1.0 / 6.0) {
            return bad("sigma_fraction must satisfy 0 < lo <= hi < 1/6".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn fl_count(&self) -> usize {
        (self.samples as f64 * self.fl_ratio).round() as usize
    }
}

/// Blobs of one generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBoxes {
    pub boxes: Vec<BBox>,
    pub amplitudes: Vec<f64>,
    /// Index into `boxes` of the driver blob.
    pub driver: usize,
    pub longitude: f64,
}

impl SampleBoxes {
    pub fn driver_box(&self) -> &BBox {
        &self.boxes[self.driver]
    }

    pub fn driver_amplitude(&self) -> f64 {
        self.amplitudes[self.driver]
    }
}

/// A generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub manifest: DatasetManifest,
    pub images: Vec<GrayImage>,
    pub boxes: Vec<SampleBoxes>,
    pub catalog: Catalog,
}

/// Peak flux assigned to a driver of amplitude `a`: `10^(-8.5 + 5.5 a)`.
/// Amplitudes below about 0.636 map below M1.0.
pub fn driver_flux(amplitude: f64) -> f64 {
    10f64.powf(-8.5 + 5.5 * amplitude)
}

/// Longitude on a linear east-west scale: the left edge is -90, the right +90.
fn longitude_of(x_center: f64, side: usize) -> f64 {
    ((x_center / side as f64) * 2.0 - 1.0) * 90.0
}

struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    /// Unit vector from the negative to the positive lobe.
    dir: (f64, f64),
    amplitude: f64,
}

impl Blob {
    /// Lobe centres are `sigma` either side of the blob centre.
    fn bbox(&self, side: usize) -> BBox {
        let r = 3.0 * self.sigma;
        let s = side as f64;
        BBox {
            x0: (self.cx - r).max(0.0),
            y0: (self.cy - r).max(0.0),
            x1: (self.cx + r).min(s),
            y1: (self.cy + r).min(s),
        }
    }

    fn add_to(&self, plane: &mut [f64], side: usize) {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let (px, py) = (self.cx + self.sigma * self.dir.0, self.cy + self.sigma * self.dir.1);
        let (nx, ny) = (self.cx - self.sigma * self.dir.0, self.cy - self.sigma * self.dir.1);
        let bb = self.bbox(side);
        for y in bb.y0.floor() as usize..(bb.y1.ceil() as usize).min(side) {
            for x in bb.x0.floor() as usize..(bb.x1.ceil() as usize).min(side) {
                // pixel centres at +0.5
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let pos = (-((fx - px).powi(2) + (fy - py).powi(2)) * inv).exp();
                let neg = (-((fx - nx).powi(2) + (fy - ny).powi(2)) * inv).exp();
                plane[y * side + x] += self.amplitude * (pos - neg);
            }
        }
    }
}

fn generate_one(cfg: &SynthConfig, index: usize, flare: bool) -> Result<(GrayImage, SampleBoxes)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let side = cfg.side;
    let s = side as f64;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut plane: Vec<f64> = (0..side * side).map(|_| noise.sample(&mut rng)).collect();

    let quiet = cfg.quiet_max_amplitude;
    let mut blobs: Vec<Blob> = Vec::with_capacity(cfg.blobs);
    let mut boxes: Vec<BBox> = Vec::with_capacity(cfg.blobs);
    for b in 0..cfg.blobs {
        let amplitude = match (b, flare) {
            (0, true) => rng.gen_range(cfg.fl_amplitude.0..=cfg.fl_amplitude.1),
            _ => rng.gen_range(0.4 * quiet..=quiet),
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let sigma = s * rng.gen_range(cfg.sigma_fraction.0..=cfg.sigma_fraction.1);
            let margin = 3.0 * sigma;
            let cx = rng.gen_range(margin..s - margin);
            let cy = rng.gen_range(margin..s - margin);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let blob = Blob { cx, cy, sigma, dir: (angle.cos(), angle.sin()), amplitude };
            let bb = blob.bbox(side);
            if boxes.iter().all(|o| !o.overlaps(&bb, 1.0)) {
                placed = Some((blob, bb));
                break;
            }
        }
        let (blob, bb) = placed.ok_or_else(|| {
            Error::Generation(format!("could not place blob {b} of sample {index} after {PLACEMENT_RETRIES} tries"))
        })?;
        blob.add_to(&mut plane, side);
        blobs.push(blob);
        boxes.push(bb);
    }
    // blob 0 is the driver: the strongest on FL images by construction, and
    // relabeled to the strongest on NF images
    let driver = if flare {
        0
    } else {
        (0..blobs.len()).max_by(|&a, &b| blobs[a].amplitude.total_cmp(&blobs[b].amplitude)).expect("at least one blob")
    };
    let pixels = plane.iter().map(|&v| quantize_pixel(v as f32)).collect();
    let img = GrayImage::from_raw(side as u32, side as u32, pixels).expect("sized buffer");
    let longitude = longitude_of(blobs[driver].cx, side);
    let amplitudes = blobs.iter().map(|b| b.amplitude).collect();
    Ok((img, SampleBoxes { boxes, amplitudes, driver, longitude }))
}

/// Generates `cfg.samples` images of noise plus bipolar blobs. Exactly one
/// driver blob per image exceeds `quiet_max_amplitude` on FL images; on NF
/// images every blob stays below it. Observations are 25 h apart from
/// `cfg.start`, and each sample gets one catalog event 30 min after its
/// timestamp whose flux follows [`driver_flux`], so relabeling with a 24 h
/// window reproduces the generated labels.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let mut is_fl = vec![false; cfg.samples];
    for &i in &order[..cfg.fl_count()] {
        is_fl[i] = true;
    }

    let generated: Vec<(GrayImage, SampleBoxes)> =
        (0..cfg.samples).into_par_iter().map(|i| generate_one(cfg, i, is_fl[i])).collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(cfg.samples);
    let mut events = Vec::with_capacity(cfg.samples);
    let mut images = Vec::with_capacity(cfg.samples);
    let mut boxes = Vec::with_capacity(cfg.samples);
    for (i, (img, b)) in generated.into_iter().enumerate() {
        let timestamp = cfg.start + Duration::hours(SYNTH_SPACING_HOURS * i as i64);
        let event = FlareEvent::new(
            timestamp + Duration::minutes(EVENT_OFFSET_MINUTES),
            driver_flux(b.driver_amplitude()),
            b.longitude,
            0.0,
            None,
        )?;
        let class = event.class();
        let label = if class.is_flare() { Label::FL } else { Label::NF };
        if label != if is_fl[i] { Label::FL } else { Label::NF } {
            return Err(Error::Generation(format!(
                "sample {i}: driver amplitude {} maps to class {class}, inconsistent with its label",
                b.driver_amplitude()
            )));
        }
        samples.push(MagnetogramSample {
            timestamp,
            image_path: image_file_name(&timestamp),
            label,
            window_max_class: class,
            window_max_flux: Some(event.peak_flux),
            hg_lon_deg: Some(event.hg_longitude),
            partition: assign_partition(&timestamp),
        });
        events.push(event);
        images.push(img);
        boxes.push(b);
    }
    let notes = vec![
        format!("synthetic seed={} samples={} side={}", cfg.seed, cfg.samples, cfg.side),
        "window_hours=24".to_owned(),
    ];
    Ok(SynthCorpus { manifest: DatasetManifest::new(samples, notes)?, images, boxes, catalog: Catalog::new(events) })
}

/// `images/<timestamp>.pgm` with filesystem-safe separators.
pub fn image_file_name(t: &DateTime<Utc>) -> String {
    format!("images/{}.pgm", t.format("%Y%m%dT%H%M%SZ"))
}

/// Inverse of [`image_file_name`] on the file name alone: `20110101T000000Z.pgm`
/// (any extension) gives its timestamp.
pub fn timestamp_from_file_name(name: &str) -> Option<DateTime<Utc>> {
    let stem = Path::new(name).file_stem()?.to_str()?;
    chrono::NaiveDateTime::parse_from_str(stem, "%Y%m%dT%H%M%SZ").ok().map(|t| t.and_utc())
}

pub const BOXES_HEADER: &str = "image_path,blob,x0,y0,x1,y1,amplitude,driver";

impl SynthCorpus {
    pub fn boxes_csv(&self) -> String {
        let mut out = format!("{BOXES_HEADER}\n");
        for (s, b) in self.manifest.samples.iter().zip(&self.boxes) {
            for (k, bb) in b.boxes.iter().enumerate() {
                out.push_str(&format!(
                    "{},{k},{},{},{},{},{},{}\n",
                    s.image_path,
                    bb.x0,
                    bb.y0,
                    bb.x1,
                    bb.y1,
                    b.amplitudes[k],
                    u8::from(k == b.driver)
                ));
            }
        }
        out
    }

    /// Writes `manifest.csv`, `catalog.csv`, `boxes.csv` and the images
    /// under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        self.manifest
            .samples
            .par_iter()
            .zip(&self.images)
            .try_for_each(|(s, img)| write_pgm(&dir.join(&s.image_path), img))?;
        self.manifest.write_csv(&dir.join("manifest.csv"))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("catalog.csv", self.catalog.to_csv())?;
        write("boxes.csv", self.boxes_csv())
    }
}

/// Parses a boxes CSV into per-image driver boxes keyed by image path.
pub fn read_driver_boxes(text: &str) -> Result<Vec<(String, BBox)>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(super::catalog::csv_error)?.iter().collect::<Vec<_>>().join(",");
    if header != BOXES_HEADER {
        return Err(Error::Format(format!("boxes header must be {BOXES_HEADER:?}")));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record.map_err(super::catalog::csv_error)?;
        if &r[7] != "1" {
            continue;
        }
        let n = |i: usize| r[i].parse::<f64>().map_err(|_| Error::Format(format!("bad box coordinate {:?}", &r[i])));
        out.push((r[0].to_owned(), BBox { x0: n(2)?, y0: n(3)?, x1: n(4)?, y1: n(5)? }));
    }
    Ok(out)
}

impl std::fmt::Display for SynthCorpus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let fl = self.manifest.samples.iter().filter(|s| s.label == Label::FL).count();
        let first = self.manifest.samples.first().map(|s| format_timestamp(&s.timestamp)).unwrap_or_default();
        write!(f, "{} samples ({fl} FL) from {first}", self.manifest.len())
    }
}
