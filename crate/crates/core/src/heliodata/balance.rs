use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::catalog::Label;
use super::manifest::{DatasetManifest, Fold};
use crate::error::{Error, Result};
use crate::ndtensor::{Real, Tensor};

/// Largest absolute rotation applied by augmentation, in degrees.
pub const MAX_ROTATION_DEG: f32 = 5.0;

const AUGMENT_SALT: u64 = 0x6175_676d;
const OVERSAMPLE_SALT: u64 = 0x6f76_6572;

/// Geometric transform applied to a training image on load.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    /// Rows reversed (upside down).
    VFlip,
    /// Columns reversed (mirror).
    HFlip,
    /// Counter-clockwise rotation about the image centre.
    Rotate { degrees: f32 },
}

impl Transform {
    /// Applies the transform to the trailing two (spatial) axes.
    pub fn apply<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = image.shape();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("transform needs a spatial image, got shape {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out = image.clone();
        for (src, dst) in image.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
            match *self {
                Transform::Identity => {}
                Transform::VFlip => {
                    for y in 0..h {
                        dst[y * w..(y + 1) * w].copy_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
                    }
                }
                Transform::HFlip => {
                    for y in 0..h {
                        for x in 0..w {
                            dst[y * w + x] = src[y * w + w - 1 - x];
                        }
                    }
                }
                Transform::Rotate { degrees } => rotate_plane(src, dst, h, w, f64::from(degrees)),
            }
        }
        Ok(out)
    }
}

/// Bilinear rotation by inverse mapping; samples falling outside the source
/// contribute 0.
fn rotate_plane<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, degrees: f64) {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize].as_f64()
        }
    };
    for y in 0..h {
        for x in 0..w {
            // y grows downwards, so a counter-clockwise turn on screen uses -sin
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            dst[y * w + x] = T::of(v);
        }
    }
}

/// One entry of a training list: a manifest row plus the transform to apply.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainItem {
    /// Manifest index of the source sample.
    pub source: usize,
    pub label: Label,
    pub transform: Transform,
}

/// Untransformed items for the given manifest rows.
pub fn items_for(manifest: &DatasetManifest, indices: &[usize]) -> Vec<TrainItem> {
    indices
        .iter()
        .map(|&i| TrainItem { source: i, label: manifest.samples[i].label, transform: Transform::Identity })
        .collect()
}

/// Rotation angle for a source sample, a pure function of `(seed, source)`.
pub fn rotation_for(seed: u64, source: usize) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
    rng.set_stream(source as u64);
    rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)
}

/// Appends a vertical flip, a horizontal flip and a small random rotation of
/// every untransformed FL item. NF items pass through unchanged.
pub fn augment_minority(items: &[TrainItem], seed: u64) -> Vec<TrainItem> {
    let mut out = items.to_vec();
    for item in items.iter().filter(|i| i.label == Label::FL && i.transform == Transform::Identity) {
        let degrees = rotation_for(seed, item.source);
        for transform in [Transform::VFlip, Transform::HFlip, Transform::Rotate { degrees }] {
            out.push(TrainItem { transform, ..*item });
        }
    }
    out
}

/// Duplicates uniformly drawn minority-class items until both classes have
/// equal counts, then shuffles. Every random draw uses one stream seeded by
/// `seed`, so the result is reproducible.
pub fn oversample_to_parity(items: &[TrainItem], seed: u64) -> Result<Vec<TrainItem>> {
    let (fl, nf): (Vec<&TrainItem>, Vec<&TrainItem>) = items.iter().partition(|i| i.label == Label::FL);
    if fl.is_empty() {
        return Err(Error::Imbalance("no FL samples to oversample".into()));
    }
    if nf.is_empty() {
        return Err(Error::Imbalance("no NF samples; parity is undefined".into()));
    }
    let (minority, deficit) = if fl.len() < nf.len() { (&fl, nf.len() - fl.len()) } else { (&nf, fl.len() - nf.len()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ OVERSAMPLE_SALT);
    let mut out = items.to_vec();
    for _ in 0..deficit {
        out.push(*minority[rng.gen_range(0..minority.len())]);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Training list of one fold: augmentation and oversampling applied to the
/// training partitions only. The test partition is never referenced.
pub fn prepare_training(manifest: &DatasetManifest, fold: &Fold, seed: u64) -> Result<Vec<TrainItem>> {
    let items = items_for(manifest, &fold.train);
    debug_assert!(items.iter().all(|i| manifest.samples[i.source].partition != fold.test_partition));
    oversample_to_parity(&augment_minority(&items, seed), seed)
}

/// `(FL, NF)` counts of a training list.
pub fn class_counts(items: &[TrainItem]) -> (usize, usize) {
    let fl = items.iter().filter(|i| i.label == Label::FL).count();
    (fl, items.len() - fl)
}
