use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Corner-aligned bilinear resampling of a `[H, W]` map.
///
/// Output pixel `d` samples source coordinate `d * (H - 1) / (out_h - 1)`; an
/// output extent of 1 samples index 0. Not recorded in any graph.
pub fn bilinear_resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[h, w] = input.shape() else {
        return Err(Error::Dimension(format!(
            "bilinear_resize expects a [H, W] map, got {:?}",
            input.shape()
        )));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!("bilinear_resize target {out_h}x{out_w} is empty")));
    }
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|d| sample_axis(d, h, out_h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|d| sample_axis(d, w, out_w)).collect();
    let src = input.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = src[y0 * w + x0].as_f64();
            let p01 = src[y0 * w + x1].as_f64();
            let p10 = src[y1 * w + x0].as_f64();
            let p11 = src[y1 * w + x1].as_f64();
            let top = p00 + (p01 - p00) * fx;
            let bottom = p10 + (p11 - p10) * fx;
            out.push(T::of(top + (bottom - top) * fy));
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w], out))
}

/// Neighbouring source indices and the fractional weight of the upper one.
fn sample_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    if dst_len == 1 || src_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = (pos.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}
