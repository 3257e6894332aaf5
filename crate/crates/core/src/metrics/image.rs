//! Image similarity: PSNR, windowed SSIM and the parsing-map variants.

use facesr_tensor::Tensor;

use crate::error::{config_err, Result};

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Parsing MSE is reported multiplied by this.
pub const PARSING_MSE_SCALE: f64 = 10.0;

fn check_same(a: &Tensor<f32>, b: &Tensor<f32>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(config_err!("{what}: shapes differ ({:?} vs {:?})", a.shape(), b.shape()));
    }
    Ok(())
}

fn clamp01(v: f32) -> f64 {
    (v as f64).clamp(0.0, 1.0)
}

/// Mean squared error after clamping both sides to [0, 1].
pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b, "mse")?;
    if a.numel() == 0 {
        return Err(config_err!("mse of empty tensors"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (clamp01(x) - clamp01(y)).powi(2))
        .sum();
    Ok(sum / a.numel() as f64)
}

/// PSNR in dB for peak 1 over all channels jointly. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// BT.601 luma of a `[3, H, W]` image, clamped to [0, 1] first.
pub fn luma(img: &Tensor<f32>) -> Result<Vec<f64>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(config_err!("luma needs a [3, H, W] image, got {s:?}"));
    }
    let n = s[1] * s[2];
    let d = img.data();
    Ok((0..n)
        .map(|i| 0.299 * clamp01(d[i]) + 0.587 * clamp01(d[n + i]) + 0.114 * clamp01(d[2 * n + i]))
        .collect())
}

fn integral(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += v[r * w + c];
            out[(r + 1) * (w + 1) + c + 1] = out[r * (w + 1) + c + 1] + row;
        }
    }
    out
}

fn window_sum(ii: &[f64], w: usize, r: usize, c: usize, k: usize) -> f64 {
    let s = w + 1;
    ii[(r + k) * s + c + k] - ii[r * s + c + k] - ii[(r + k) * s + c] + ii[r * s + c]
}

/// Mean SSIM of two `h × w` planes over every 8×8 window (stride 1).
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w {
        return Err(config_err!("ssim: planes do not match {h}x{w}"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(config_err!("ssim: {h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let [ix, iy, ixx, iyy, ixy] = [x, y, &xx[..], &yy[..], &xy[..]].map(|p| integral(p, h, w));
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let mx = window_sum(&ix, w, r, c, k) / n;
            let my = window_sum(&iy, w, r, c, k) / n;
            let vx = (window_sum(&ixx, w, r, c, k) / n - mx * mx).max(0.0);
            let vy = (window_sum(&iyy, w, r, c, k) / n - my * my).max(0.0);
            let cxy = window_sum(&ixy, w, r, c, k) / n - mx * my;
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// SSIM of two RGB images `[3, H, W]`, computed on luma.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let s = a.shape();
    ssim_plane(&luma(a)?, &luma(b)?, s[1], s[2])
}

/// Mean per-channel SSIM of `[C, H, W]` maps.
pub fn ssim_channels(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let s = a.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(config_err!("ssim needs [C, H, W] maps, got {s:?}"));
    }
    let n = s[1] * s[2];
    let plane = |t: &Tensor<f32>, k: usize| -> Vec<f64> { t.data()[k * n..(k + 1) * n].iter().map(|&v| clamp01(v)).collect() };
    let mut sum = 0.0;
    for k in 0..s[0] {
        sum += ssim_plane(&plane(a, k), &plane(b, k), s[1], s[2])?;
    }
    Ok(sum / s[0] as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParsingScores {
    pub psnr: f64,
    pub ssim: f64,
    /// Mean squared error times `PARSING_MSE_SCALE`.
    pub mse: f64,
}

/// Compare predicted and ground-truth parsing maps as one multi-channel image.
pub fn parsing_metrics(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<ParsingScores> {
    if pred.shape().first() != gt.shape().first() {
        return Err(config_err!(
            "parsing maps have {:?} channels, ground truth {:?}",
            pred.shape().first(),
            gt.shape().first()
        ));
    }
    Ok(ParsingScores {
        psnr: psnr(pred, gt)?,
        ssim: ssim_channels(pred, gt)?,
        mse: PARSING_MSE_SCALE * mse(pred, gt)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windowed_ssim_matches_direct_sums() {
        let (h, w) = (10, 11);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let y: Vec<f64> = (0..h * w).map(|i| ((i * 11) % 13) as f64 / 13.0).collect();
        let mut total = 0.0;
        let mut count = 0.0;
        for r in 0..=h - 8 {
            for c in 0..=w - 8 {
                let idx: Vec<usize> = (0..64).map(|i| (r + i / 8) * w + c + i % 8).collect();
                let m = |v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / 64.0;
                let (mx, my) = (m(&x), m(&y));
                let vx = idx.iter().map(|&i| (x[i] - mx).powi(2)).sum::<f64>() / 64.0;
                let vy = idx.iter().map(|&i| (y[i] - my).powi(2)).sum::<f64>() / 64.0;
                let cxy = idx.iter().map(|&i| (x[i] - mx) * (y[i] - my)).sum::<f64>() / 64.0;
                total += (2.0 * mx * my + C1) * (2.0 * cxy + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1.0;
            }
        }
        assert!((ssim_plane(&x, &y, h, w).unwrap() - total / count).abs() < 1e-12);
    }
}
