//! Landmark extraction from heatmaps and normalized landmark error.

use facesr_tensor::Tensor;

use crate::error::{config_err, Result};

/// NRMSE values are reported multiplied by this.
pub const NRMSE_SCALE: f64 = 100.0;

/// Peak location `[row, col]` of each heatmap channel in grid units.
///
/// The peak is the first maximum in row-major order, then moved a quarter
/// pixel toward the larger of its two neighbors along each axis (interior
/// peaks only). Channels without a positive value give `None`.
pub fn landmarks_from_heatmaps(heatmaps: &Tensor<f32>) -> Result<Vec<Option<[f64; 2]>>> {
    let s = heatmaps.shape();
    if s.len() != 3 {
        return Err(config_err!("heatmaps must be [K, H, W], got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    Ok((0..s[0])
        .map(|k| {
            let plane = &heatmaps.data()[k * n..(k + 1) * n];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            if !(plane[best] > 0.0) {
                return None;
            }
            let (r, c) = (best / w, best % w);
            let nudge = |lo: f32, hi: f32| -> f64 {
                if hi > lo {
                    0.25
                } else if lo > hi {
                    -0.25
                } else {
                    0.0
                }
            };
            let mut rr = r as f64;
            let mut cc = c as f64;
            if r > 0 && r + 1 < h {
                rr += nudge(plane[best - w], plane[best + w]);
            }
            if c > 0 && c + 1 < w {
                cc += nudge(plane[best - 1], plane[best + 1]);
            }
            Some([rr, cc])
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nrmse {
    /// `None` when every prediction was flagged.
    pub value: Option<f64>,
    /// Flagged predictions left out of the mean.
    pub excluded: usize,
}

/// Root mean squared landmark error over the inter-ocular distance
/// (landmarks 0 and 1 of `gt`), times `NRMSE_SCALE`.
pub fn nrmse(pred: &[Option<[f64; 2]>], gt: &[[f64; 2]]) -> Result<Nrmse> {
    if pred.len() != gt.len() {
        return Err(config_err!("nrmse: {} predictions for {} landmarks", pred.len(), gt.len()));
    }
    if gt.len() < 2 {
        return Err(config_err!("nrmse needs both eye landmarks"));
    }
    let norm = ((gt[0][0] - gt[1][0]).powi(2) + (gt[0][1] - gt[1][1]).powi(2)).sqrt();
    if !(norm > 0.0) {
        return Err(config_err!("nrmse: inter-ocular distance is zero"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if let Some(p) = p {
            sum += (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
            used += 1;
        }
    }
    Ok(Nrmse {
        value: (used > 0).then(|| NRMSE_SCALE * (sum / used as f64).sqrt() / norm),
        excluded: pred.len() - used,
    })
}
