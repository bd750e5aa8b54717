//! 2-D map kernels: bilinear upsampling, Gaussian smoothing, top-fraction mean.
//!
//! Maps are `[H, W]` tensors.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BLUR_SIGMA: f64 = 4.0;
pub const BLUR_RADIUS: usize = 2;

fn map_dims(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::shape(format!("expected a non-empty [H, W] map, got {s:?}"))),
    }
}

/// Source coordinate and blend weight for one output index
/// (half-pixel centers, clamped at the edges).
fn source_index(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear interpolation of an `h × w` map to `out_h × out_w`.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map_dims(map)?;
    let src = map.data();
    let cols: Vec<_> = (0..out_w).map(|x| source_index(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, wy) = source_index(y, h, out_h);
        for &(x0, x1, wx) in &cols {
            let a = src[y0 * w + x0] as f64;
            let b = src[y0 * w + x1] as f64;
            let c = src[y1 * w + x0] as f64;
            let d = src[y1 * w + x1] as f64;
            let top = a + (b - a) * wx;
            let bottom = c + (d - c) * wx;
            out.push((top + (bottom - top) * wy) as f32);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Normalized 1-D taps of the 5-tap Gaussian (σ = 4).
pub fn gaussian_taps() -> [f64; 2 * BLUR_RADIUS + 1] {
    let mut taps = [0.0; 2 * BLUR_RADIUS + 1];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - BLUR_RADIUS as f64;
        *t = (-x * x / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable 5×5 Gaussian smoothing with replicate-edge padding.
pub fn gaussian_blur(map: &Tensor) -> Result<Tensor> {
    let (h, w) = map_dims(map)?;
    let taps = gaussian_taps();
    let r = BLUR_RADIUS as isize;
    let src = map.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = clamp(x as isize + k as isize - r, w);
                acc += t * src[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = clamp(y as isize + k as isize - r, h);
                acc += t * tmp[yy * w + x];
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Mean of the `max(1, ⌊fraction·n⌋)` largest values.
pub fn top_fraction_mean(values: &[f32], fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::ConfigInvalid(format!("top fraction {fraction} not in (0, 1]")));
    }
    if values.is_empty() {
        return Err(Error::shape("top-fraction mean of an empty map"));
    }
    let k = ((fraction * values.len() as f64).floor() as usize).max(1);
    let mut sorted = values.to_vec();
    let desc = |a: &f32, b: &f32| b.total_cmp(a);
    if k < sorted.len() {
        sorted.select_nth_unstable_by(k - 1, desc);
    }
    let top = &mut sorted[..k];
    top.sort_by(desc);
    Ok(top.iter().map(|&v| v as f64).sum::<f64>() / k as f64)
}
