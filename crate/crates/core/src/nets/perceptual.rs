//! Fixed feature extractor for the perceptual loss: five seeded conv + ReLU
//! layers whose weights are never trained.

use facesr_tensor::{Element, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{fingerprint, NetConfig, Role};
use super::layers::{conv, Bound};
use crate::error::Result;
use crate::params::{ModelParams, ParamInit};

/// (output width, stride) per layer.
pub const PHI_LAYERS: [(usize, usize); 5] = [(16, 1), (32, 2), (32, 1), (64, 2), (64, 1)];

pub fn perceptual_forward<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, img: Var) -> Result<Var> {
    let mut h = img;
    for (i, &(_, stride)) in PHI_LAYERS.iter().enumerate() {
        let c = conv(tape, b, &format!("phi.c{}", i + 1), h, stride, 1)?;
        h = tape.relu(c);
    }
    Ok(h)
}

/// Frozen extractor weights; any optimizer refuses them.
pub fn init_perceptual(cfg: &NetConfig, seed: u64) -> Result<ModelParams<f32>> {
    let mut p = ParamInit::new(fingerprint(cfg, Role::Perceptual), ChaCha8Rng::seed_from_u64(seed));
    let mut c_in = 3;
    for (i, &(width, _)) in PHI_LAYERS.iter().enumerate() {
        p.conv(&format!("phi.c{}", i + 1), c_in, width, 3, true)?;
        c_in = width;
    }
    Ok(p.finish().freeze())
}
