//! Rasterization of scenes into images, landmark heatmaps and parsing maps.

use facesr_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::scene::{FaceScene, Region};
use crate::error::{config_err, Result};

/// Sub-samples per pixel edge when rasterizing the image.
pub const SUPERSAMPLE: usize = 4;

/// How atomic regions are grouped into parsing channels. Every layout ends
/// with a channel that absorbs everything else, so channels are disjoint and
/// sum to one at every pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsingLayout {
    /// face (skin and brows), eyes, nose, mouth, background.
    Global5,
    /// face (skin, brows and nose), eyes, mouth, background.
    Global4,
    /// Eight local components plus one channel for everything else.
    Local9,
    /// Eight local components, skin, background.
    Global10,
}

impl ParsingLayout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global5" => Ok(ParsingLayout::Global5),
            "global4" => Ok(ParsingLayout::Global4),
            "local9" => Ok(ParsingLayout::Local9),
            "global10" => Ok(ParsingLayout::Global10),
            other => Err(config_err!("unknown parsing layout {other:?} (global5|global4|local9|global10)")),
        }
    }

    pub fn channels(self) -> usize {
        match self {
            ParsingLayout::Global5 => 5,
            ParsingLayout::Global4 => 4,
            ParsingLayout::Local9 => 9,
            ParsingLayout::Global10 => 10,
        }
    }

    pub fn channel(self, r: Region) -> usize {
        use Region::*;
        match self {
            ParsingLayout::Global5 => match r {
                Skin | LeftBrow | RightBrow => 0,
                LeftEye | RightEye => 1,
                Nose => 2,
                UpperLip | InnerMouth | LowerLip => 3,
                Background => 4,
            },
            ParsingLayout::Global4 => match r {
                Skin | LeftBrow | RightBrow | Nose => 0,
                LeftEye | RightEye => 1,
                UpperLip | InnerMouth | LowerLip => 2,
                Background => 3,
            },
            ParsingLayout::Local9 | ParsingLayout::Global10 => match r {
                LeftBrow => 0,
                RightBrow => 1,
                LeftEye => 2,
                RightEye => 3,
                Nose => 4,
                UpperLip => 5,
                InnerMouth => 6,
                LowerLip => 7,
                Skin => 8,
                Background if self == ParsingLayout::Global10 => 9,
                Background => 8,
            },
        }
    }

    /// Channel that collects background pixels.
    pub fn background_channel(self) -> usize {
        self.channel(Region::Background)
    }
}

/// Anti-aliased `[3, hr, hr]` rendering.
pub fn render_image(scene: &FaceScene, hr: usize) -> Tensor<f32> {
    let n = hr * hr;
    let mut data = vec![0.0f32; 3 * n];
    let ss = SUPERSAMPLE;
    let inv = 1.0 / (hr * ss) as f64;
    for row in 0..hr {
        for col in 0..hr {
            let mut acc = [0.0f64; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = ((col * ss + sx) as f64 + 0.5) * inv;
                    let y = ((row * ss + sy) as f64 + 0.5) * inv;
                    let c = scene.color(x, y);
                    for k in 0..3 {
                        acc[k] += c[k] as f64;
                    }
                }
            }
            for k in 0..3 {
                data[k * n + row * hr + col] = (acc[k] / (ss * ss) as f64) as f32;
            }
        }
    }
    Tensor::new(vec![3, hr, hr], data).expect("shape matches")
}

/// `[P, side, side]` {0,1} masks by pixel-center membership.
pub fn render_parsing(scene: &FaceScene, side: usize, layout: ParsingLayout) -> Tensor<f32> {
    let n = side * side;
    let mut data = vec![0.0f32; layout.channels() * n];
    for row in 0..side {
        for col in 0..side {
            let x = (col as f64 + 0.5) / side as f64;
            let y = (row as f64 + 0.5) / side as f64;
            let ch = layout.channel(scene.region(x, y));
            data[ch * n + row * side + col] = 1.0;
        }
    }
    Tensor::new(vec![layout.channels(), side, side], data).expect("shape matches")
}

/// Everything rendered for one scene at one resolution.
pub struct Rendered {
    pub image: Tensor<f32>,
    /// (row, col) on the `hr` grid.
    pub landmarks: Vec<[usize; 2]>,
    pub parsing: Tensor<f32>,
}

pub fn render_scene(scene: &FaceScene, hr: usize, k: usize, layout: ParsingLayout) -> Result<Rendered> {
    scene.validate()?;
    if hr < 8 || hr % 2 != 0 {
        return Err(config_err!("render size {hr} must be even and at least 8"));
    }
    Ok(Rendered {
        image: render_image(scene, hr),
        landmarks: scene.landmark_pixels(k, hr)?,
        parsing: render_parsing(scene, hr / 2, layout),
    })
}

/// Heatmap sigma in prior-grid pixels for a given HR size.
pub fn heatmap_sigma(hr: usize) -> f64 {
    hr as f64 / 32.0
}

/// One unnormalized Gaussian (peak 1) per landmark on a `size` grid.
/// Landmarks outside the grid give a zero channel and a `true` flag.
pub fn render_heatmaps(landmarks: &[[i64; 2]], size: usize, sigma: f64) -> Result<(Tensor<f32>, Vec<bool>)> {
    if !(sigma > 0.0) {
        return Err(config_err!("heatmap sigma must be positive, got {sigma}"));
    }
    let n = size * size;
    let mut data = vec![0.0f32; landmarks.len() * n];
    let mut outside = vec![false; landmarks.len()];
    let denom = 2.0 * sigma * sigma;
    for (k, &[r0, c0]) in landmarks.iter().enumerate() {
        if r0 < 0 || c0 < 0 || r0 >= size as i64 || c0 >= size as i64 {
            outside[k] = true;
            continue;
        }
        for r in 0..size {
            for c in 0..size {
                let d2 = ((r as i64 - r0).pow(2) + (c as i64 - c0).pow(2)) as f64;
                data[k * n + r * size + c] = (-d2 / denom).exp() as f32;
            }
        }
    }
    Ok((Tensor::new(vec![landmarks.len(), size, size], data)?, outside))
}

/// HR landmark indices mapped to the half-resolution prior grid.
pub fn to_prior_grid(landmarks: &[[usize; 2]]) -> Vec<[i64; 2]> {
    landmarks.iter().map(|&[r, c]| [(r / 2) as i64, (c / 2) as i64]).collect()
}
