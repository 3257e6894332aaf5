//! Bicubic resampling with the Catmull-Rom kernel (a = -0.5).
//!
//! Downscaling widens the kernel by the scale factor so every input pixel
//! contributes (antialiasing). Edges are clamped. Taps are normalized to
//! sum to one, so constant images stay constant.

use facesr_tensor::Tensor;

use crate::error::{config_err, Result};

const A: f64 = -0.5;

pub fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * A
    } else {
        0.0
    }
}

/// Per output index, the (input index, weight) taps of a 1-D resize.
pub fn resize_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = cubic((j as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, n_in as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resize every channel of a `[C, H, W]` image to `[C, out_h, out_w]`.
pub fn bicubic_resize(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(config_err!("resize expects [C, H, W], got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < 4 || w < 4 || out_h < 4 || out_w < 4 {
        return Err(config_err!("resize sizes must be at least 4 ({h}x{w} -> {out_h}x{out_w})"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let wx = resize_weights(w, out_w);
    let wy = resize_weights(h, out_h);
    let src = img.data();
    let mut out = vec![0.0f32; c * out_h * out_w];
    let mut rows = vec![0.0f64; h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (x, taps) in wx.iter().enumerate() {
                rows[y * out_w + x] = taps.iter().map(|&(j, wt)| plane[y * w + j] as f64 * wt).sum();
            }
        }
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(j, wt)| rows[j * out_w + x] * wt).sum();
                out[(ch * out_h + y) * out_w + x] = v as f32;
            }
        }
    }
    Ok(Tensor::new(vec![c, out_h, out_w], out)?)
}

/// Bicubic downscale by `scale`, returning the small image.
pub fn downscale(hr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let s = hr.shape();
    if s.len() != 3 || s[1] % scale != 0 || s[2] % scale != 0 {
        return Err(config_err!("image {s:?} is not divisible by scale {scale}"));
    }
    bicubic_resize(hr, s[1] / scale, s[2] / scale)
}

/// Downscale by `scale` then upscale back: the network input.
pub fn degrade(hr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let small = downscale(hr, scale)?;
    let s = hr.shape();
    bicubic_resize(&small, s[1], s[2])
}
