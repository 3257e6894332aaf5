//! Procedural face scenes.
//!
//! Geometry is resolution independent. The face ellipse lives in normalized
//! image coordinates (x right, y down, both in [0, 1]); components are
//! ellipses in face-local coordinates (u, v), where the face boundary is the
//! unit circle and v points toward the chin before rotation. "Left" means
//! image-left.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Normalized squared radius of (u, v); <= 1 inside.
    pub fn rho(&self, u: f64, v: f64) -> f64 {
        let du = (u - self.cx) / self.rx;
        let dv = (v - self.cy) / self.ry;
        du * du + dv * dv
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        self.rho(u, v) <= 1.0
    }

    fn boundary(&self, k: usize, n: usize) -> (f64, f64) {
        let t = std::f64::consts::TAU * k as f64 / n as f64;
        (self.cx + self.rx * t.cos(), self.cy + self.ry * t.sin())
    }
}

pub type Rgb = [f32; 3];

/// Smallest labelled parts of a face. Parsing layouts group these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Background,
    Skin,
    LeftBrow,
    RightBrow,
    LeftEye,
    RightEye,
    Nose,
    UpperLip,
    InnerMouth,
    LowerLip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceScene {
    pub seed: u64,
    pub center: (f64, f64),
    /// Horizontal and vertical semi-axes before rotation.
    pub axes: (f64, f64),
    pub rotation_deg: f64,
    /// Background gradient, top to bottom.
    pub background: [Rgb; 2],
    pub skin: Rgb,
    /// Directional shading strength and light direction in face space.
    pub shading: f64,
    pub light: (f64, f64),
    pub brow_color: Rgb,
    pub iris_color: Rgb,
    pub lip_color: Rgb,
    pub mouth_color: Rgb,
    pub left_eye: Ellipse,
    pub right_eye: Ellipse,
    pub left_brow: Ellipse,
    pub right_brow: Ellipse,
    pub nose: Ellipse,
    pub mouth: Ellipse,
    pub inner_mouth: Ellipse,
}

/// Landmarks available, in channel order. Configs use a prefix.
pub const LANDMARK_NAMES: [&str; 15] = [
    "left_eye",
    "right_eye",
    "nose_tip",
    "mouth_left",
    "mouth_right",
    "left_eye_outer",
    "left_eye_inner",
    "right_eye_inner",
    "right_eye_outer",
    "upper_lip_top",
    "lower_lip_bottom",
    "chin",
    "left_brow",
    "right_brow",
    "forehead",
];

pub const MAX_LANDMARKS: usize = LANDMARK_NAMES.len();

fn jitter(rng: &mut ChaCha8Rng, center: f64, spread: f64) -> f64 {
    center + rng.gen_range(-spread..=spread)
}

fn color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Rgb {
    [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
}

impl FaceScene {
    /// Upright, centered, jitter-free face.
    pub fn canonical() -> Self {
        let eye = |s: f64| Ellipse {
            cx: 0.38 * s,
            cy: -0.12,
            rx: 0.16,
            ry: 0.085,
        };
        let brow = |s: f64| Ellipse {
            cx: 0.38 * s,
            cy: -0.34,
            rx: 0.2,
            ry: 0.04,
        };
        let mouth = Ellipse {
            cx: 0.0,
            cy: 0.55,
            rx: 0.3,
            ry: 0.11,
        };
        FaceScene {
            seed: 0,
            center: (0.5, 0.5),
            axes: (0.34, 0.4),
            rotation_deg: 0.0,
            background: [[0.3, 0.4, 0.6], [0.1, 0.2, 0.3]],
            skin: [0.8, 0.64, 0.54],
            shading: 0.15,
            light: (-0.5, -0.5),
            brow_color: [0.2, 0.13, 0.08],
            iris_color: [0.3, 0.2, 0.1],
            lip_color: [0.7, 0.3, 0.3],
            mouth_color: [0.25, 0.05, 0.05],
            left_eye: eye(-1.0),
            right_eye: eye(1.0),
            left_brow: brow(-1.0),
            right_brow: brow(1.0),
            nose: Ellipse {
                cx: 0.0,
                cy: 0.18,
                rx: 0.09,
                ry: 0.16,
            },
            inner_mouth: Ellipse {
                ry: 0.11 * 0.3,
                rx: 0.3 * 0.8,
                ..mouth
            },
            mouth,
        }
    }

    /// Random scene; always valid.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let eye_y = jitter(r, -0.12, 0.05);
        let eye_dx = jitter(r, 0.38, 0.04);
        let eye_rx = jitter(r, 0.16, 0.03);
        let eye_ry = jitter(r, 0.085, 0.02);
        let eye = |r: &mut ChaCha8Rng, s: f64| Ellipse {
            cx: s * eye_dx + jitter(r, 0.0, 0.015),
            cy: eye_y + jitter(r, 0.0, 0.015),
            rx: eye_rx,
            ry: eye_ry,
        };
        let left_eye = eye(r, -1.0);
        let right_eye = eye(r, 1.0);
        let brow_gap = jitter(r, 0.2, 0.04);
        let brow_rx = jitter(r, 0.2, 0.03);
        let brow_ry = jitter(r, 0.04, 0.01);
        let brow = |r: &mut ChaCha8Rng, e: &Ellipse| Ellipse {
            cx: e.cx + jitter(r, 0.0, 0.02),
            cy: e.cy - brow_gap,
            rx: brow_rx,
            ry: brow_ry,
        };
        let left_brow = brow(r, &left_eye);
        let right_brow = brow(r, &right_eye);
        let nose = Ellipse {
            cx: jitter(r, 0.0, 0.03),
            cy: jitter(r, 0.18, 0.04),
            rx: jitter(r, 0.09, 0.02),
            ry: jitter(r, 0.16, 0.03),
        };
        let mouth = Ellipse {
            cx: jitter(r, 0.0, 0.03),
            cy: jitter(r, 0.55, 0.05),
            rx: jitter(r, 0.3, 0.05),
            ry: jitter(r, 0.11, 0.03),
        };
        let inner_mouth = Ellipse {
            rx: mouth.rx * 0.8,
            ry: mouth.ry * r.gen_range(0.15..=0.5),
            ..mouth
        };
        let tone: f32 = r.gen_range(0.3..=0.95);
        let skin = [
            (tone + r.gen_range(-0.05..=0.05)).clamp(0.0, 1.0),
            tone * r.gen_range(0.7..=0.85),
            tone * r.gen_range(0.55..=0.75),
        ];
        let light_angle: f64 = r.gen_range(0.0..std::f64::consts::TAU);
        let scene = FaceScene {
            seed,
            center: (jitter(r, 0.5, 0.04), jitter(r, 0.5, 0.03)),
            axes: (r.gen_range(0.3..=0.37), r.gen_range(0.36..=0.42)),
            rotation_deg: r.gen_range(-12.0..=12.0),
            background: [color(r, 0.0, 1.0), color(r, 0.0, 1.0)],
            skin,
            shading: r.gen_range(0.05..=0.3),
            light: (light_angle.cos(), light_angle.sin()),
            brow_color: color(r, 0.02, 0.3),
            iris_color: color(r, 0.05, 0.5),
            lip_color: [r.gen_range(0.5..=0.9), r.gen_range(0.15..=0.4), r.gen_range(0.15..=0.4)],
            mouth_color: [r.gen_range(0.15..=0.35), 0.05, 0.05],
            left_eye,
            right_eye,
            left_brow,
            right_brow,
            nose,
            mouth,
            inner_mouth,
        };
        debug_assert!(scene.validate().is_ok(), "random scene {seed} invalid");
        scene
    }

    fn components(&self) -> [(&'static str, &Ellipse); 7] {
        [
            ("left eye", &self.left_eye),
            ("right eye", &self.right_eye),
            ("left brow", &self.left_brow),
            ("right brow", &self.right_brow),
            ("nose", &self.nose),
            ("mouth", &self.mouth),
            ("inner mouth", &self.inner_mouth),
        ]
    }

    /// Rejects scenes whose face leaves the frame or whose components
    /// leave the face.
    pub fn validate(&self) -> Result<()> {
        let (ax, ay) = self.axes;
        if !(ax > 0.0 && ay > 0.0) {
            return Err(config_err!("face axes must be positive"));
        }
        let t = self.rotation_deg.to_radians();
        let half_w = ((ax * t.cos()).powi(2) + (ay * t.sin()).powi(2)).sqrt();
        let half_h = ((ax * t.sin()).powi(2) + (ay * t.cos()).powi(2)).sqrt();
        let (cx, cy) = self.center;
        if cx - half_w < 0.0 || cx + half_w > 1.0 || cy - half_h < 0.0 || cy + half_h > 1.0 {
            return Err(config_err!("face ellipse leaves the frame"));
        }
        for (name, e) in self.components() {
            if !(e.rx > 0.0 && e.ry > 0.0) {
                return Err(config_err!("{name} has non-positive radius"));
            }
            for k in 0..64 {
                let (u, v) = e.boundary(k, 64);
                if u * u + v * v > 1.0 {
                    return Err(config_err!("{name} extends outside the face"));
                }
            }
        }
        Ok(())
    }

    /// Normalized image point to face-local coordinates.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let t = self.rotation_deg.to_radians();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = t.cos() * dx + t.sin() * dy;
        let v = -t.sin() * dx + t.cos() * dy;
        (u / self.axes.0, v / self.axes.1)
    }

    /// Face-local coordinates to normalized image point.
    pub fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let t = self.rotation_deg.to_radians();
        let (du, dv) = (u * self.axes.0, v * self.axes.1);
        (
            self.center.0 + t.cos() * du - t.sin() * dv,
            self.center.1 + t.sin() * du + t.cos() * dv,
        )
    }

    pub fn region_local(&self, u: f64, v: f64) -> Region {
        if u * u + v * v > 1.0 {
            return Region::Background;
        }
        if self.inner_mouth.contains(u, v) {
            return Region::InnerMouth;
        }
        if self.mouth.contains(u, v) {
            return if v < self.mouth.cy { Region::UpperLip } else { Region::LowerLip };
        }
        if self.left_eye.contains(u, v) {
            return Region::LeftEye;
        }
        if self.right_eye.contains(u, v) {
            return Region::RightEye;
        }
        if self.left_brow.contains(u, v) {
            return Region::LeftBrow;
        }
        if self.right_brow.contains(u, v) {
            return Region::RightBrow;
        }
        if self.nose.contains(u, v) {
            return Region::Nose;
        }
        Region::Skin
    }

    pub fn region(&self, x: f64, y: f64) -> Region {
        let (u, v) = self.to_local(x, y);
        self.region_local(u, v)
    }

    /// Color at a normalized image point.
    pub fn color(&self, x: f64, y: f64) -> Rgb {
        let (u, v) = self.to_local(x, y);
        let lit = |c: Rgb, k: f64| -> Rgb {
            let f = (k * (1.0 + self.shading * (u * self.light.0 + v * self.light.1))) as f32;
            [c[0] * f, c[1] * f, c[2] * f]
        };
        let rgb = match self.region_local(u, v) {
            Region::Background => {
                let [a, b] = self.background;
                let t = y.clamp(0.0, 1.0) as f32;
                [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
            }
            Region::Skin => lit(self.skin, 1.0),
            Region::Nose => lit(self.skin, 0.85 + 0.1 * (self.nose.cy - v).max(0.0)),
            Region::LeftBrow | Region::RightBrow => self.brow_color,
            Region::LeftEye | Region::RightEye => {
                let e = if self.left_eye.contains(u, v) { &self.left_eye } else { &self.right_eye };
                // Iris and pupil are circles in image space.
                let r = ((u - e.cx).powi(2) + ((v - e.cy) * self.axes.1 / self.axes.0).powi(2)).sqrt();
                let iris = e.ry * self.axes.1 / self.axes.0;
                if r < 0.4 * iris {
                    [0.03, 0.03, 0.03]
                } else if r < iris {
                    self.iris_color
                } else {
                    [0.93, 0.92, 0.88]
                }
            }
            Region::UpperLip => lit(self.lip_color, 0.9),
            Region::LowerLip => lit(self.lip_color, 1.05),
            Region::InnerMouth => self.mouth_color,
        };
        rgb.map(|c| c.clamp(0.0, 1.0))
    }

    /// Landmark positions in face-local coordinates, catalog order.
    pub fn landmarks_local(&self) -> [(f64, f64); MAX_LANDMARKS] {
        let (le, re, n, m) = (&self.left_eye, &self.right_eye, &self.nose, &self.mouth);
        [
            (le.cx, le.cy),
            (re.cx, re.cy),
            (n.cx, n.cy + n.ry),
            (m.cx - m.rx, m.cy),
            (m.cx + m.rx, m.cy),
            (le.cx - le.rx, le.cy),
            (le.cx + le.rx, le.cy),
            (re.cx - re.rx, re.cy),
            (re.cx + re.rx, re.cy),
            (m.cx, m.cy - m.ry),
            (m.cx, m.cy + m.ry),
            (0.0, 0.97),
            (self.left_brow.cx, self.left_brow.cy),
            (self.right_brow.cx, self.right_brow.cy),
            (0.0, -0.75),
        ]
    }

    /// First `k` landmarks as (row, col) pixel indices on an `hr` grid.
    pub fn landmark_pixels(&self, k: usize, hr: usize) -> Result<Vec<[usize; 2]>> {
        if k > MAX_LANDMARKS {
            return Err(config_err!("at most {MAX_LANDMARKS} landmarks are available, asked for {k}"));
        }
        let to_px = |t: f64| ((t * hr as f64).floor().max(0.0) as usize).min(hr - 1);
        Ok(self.landmarks_local()[..k]
            .iter()
            .map(|&(u, v)| {
                let (x, y) = self.to_image(u, v);
                [to_px(y), to_px(x)]
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scenes_are_valid_and_deterministic() {
        for seed in 0..500 {
            let s = FaceScene::random(seed);
            s.validate().unwrap();
            assert_eq!(s, FaceScene::random(seed));
        }
        assert_ne!(FaceScene::random(1), FaceScene::random(2));
    }

    #[test]
    fn out_of_frame_scene_rejected() {
        let mut s = FaceScene::canonical();
        s.center = (0.2, 0.5);
        assert!(s.validate().is_err());
        let mut s = FaceScene::canonical();
        s.mouth.rx = 0.99;
        assert!(s.validate().is_err());
    }

    #[test]
    fn local_transform_round_trips() {
        let s = FaceScene::random(3);
        let (x, y) = s.to_image(0.3, -0.2);
        let (u, v) = s.to_local(x, y);
        assert!((u - 0.3).abs() < 1e-12 && (v + 0.2).abs() < 1e-12);
    }
}
