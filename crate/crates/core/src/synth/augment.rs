//! The eight rotations and reflections of a square image.

use facesr_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Horizontal flip (if `flip`) followed by `quarter_turns` counter-clockwise
/// quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral::new(0, false);
    pub const ROT90: Dihedral = Dihedral::new(1, false);
    pub const ROT180: Dihedral = Dihedral::new(2, false);
    pub const ROT270: Dihedral = Dihedral::new(3, false);
    pub const HFLIP: Dihedral = Dihedral::new(0, true);

    /// Identity first, then the seven non-trivial elements.
    pub const ALL: [Dihedral; 8] = [
        Dihedral::new(0, false),
        Dihedral::new(1, false),
        Dihedral::new(2, false),
        Dihedral::new(3, false),
        Dihedral::new(0, true),
        Dihedral::new(1, true),
        Dihedral::new(2, true),
        Dihedral::new(3, true),
    ];

    pub const fn new(quarter_turns: u8, flip: bool) -> Self {
        Dihedral {
            quarter_turns: quarter_turns % 4,
            flip,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::IDENTITY),
            "rot90" => Ok(Self::ROT90),
            "rot180" => Ok(Self::ROT180),
            "rot270" => Ok(Self::ROT270),
            "hflip" => Ok(Self::HFLIP),
            other => Err(config_err!("unknown augmentation {other:?}")),
        }
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Dihedral::new(4 - self.quarter_turns, false)
        }
    }

    /// `self` applied after `first`.
    pub fn after(self, first: Dihedral) -> Self {
        // Flip conjugates a rotation into its inverse: F R^b = R^-b F.
        if self.flip {
            Dihedral::new(self.quarter_turns + 4 - first.quarter_turns, !first.flip)
        } else {
            Dihedral::new(self.quarter_turns + first.quarter_turns, first.flip)
        }
    }

    /// Where pixel (r, c) of an `n x n` grid lands.
    pub fn map(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let (mut r, mut c) = if self.flip { (r, n - 1 - c) } else { (r, c) };
        for _ in 0..self.quarter_turns {
            (r, c) = (n - 1 - c, r);
        }
        (r, c)
    }

    /// Transform the two trailing (square) axes of `t`.
    pub fn apply(self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(config_err!("augmentation needs square trailing axes, got {s:?}"));
        }
        if self == Self::IDENTITY {
            return Ok(t.clone());
        }
        let n = s[s.len() - 1];
        let planes = t.numel() / (n * n);
        let src = t.data();
        let mut out = vec![0.0f32; src.len()];
        for p in 0..planes {
            let base = p * n * n;
            for r in 0..n {
                for c in 0..n {
                    let (r2, c2) = self.map(r, c, n);
                    out[base + r2 * n + c2] = src[base + r * n + c];
                }
            }
        }
        Ok(Tensor::new(s.to_vec(), out)?)
    }

    pub fn apply_landmarks(self, landmarks: &[[usize; 2]], n: usize) -> Vec<[usize; 2]> {
        landmarks
            .iter()
            .map(|&[r, c]| {
                let (r, c) = self.map(r, c, n);
                [r, c]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> Tensor<f32> {
        Tensor::from_fn(vec![2, 5, 5], |i| i as f32)
    }

    #[test]
    fn rotation_four_times_and_flip_twice_are_identity() {
        let x = probe();
        let mut y = x.clone();
        for _ in 0..4 {
            y = Dihedral::ROT90.apply(&y).unwrap();
        }
        assert_eq!(y, x);
        let f = Dihedral::HFLIP;
        assert_eq!(f.apply(&f.apply(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn inverse_and_composition_agree_with_application() {
        let x = probe();
        for g in Dihedral::ALL {
            assert_eq!(g.inverse().apply(&g.apply(&x).unwrap()).unwrap(), x, "{g:?}");
            for h in Dihedral::ALL {
                let seq = h.apply(&g.apply(&x).unwrap()).unwrap();
                assert_eq!(h.after(g).apply(&x).unwrap(), seq, "{h:?} after {g:?}");
            }
        }
    }

    #[test]
    fn rot90_moves_top_right_to_top_left() {
        let x = Tensor::from_fn(vec![1, 2, 2], |i| i as f32);
        // [[0,1],[2,3]] rotated counter-clockwise is [[1,3],[0,2]].
        assert_eq!(Dihedral::ROT90.apply(&x).unwrap().data(), &[1.0, 3.0, 0.0, 2.0]);
    }
}
