//! Patch discriminator conditioned on the bicubic input.

use facesr_tensor::{Element, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{fingerprint, NetConfig, Role};
use super::layers::{batch_norm, conv, init, Bound};
use crate::error::{config_err, Result};
use crate::params::{ModelParams, ParamInit};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Overall spatial reduction: four stride-2 stages.
pub const PATCH_FACTOR: usize = 16;

/// Per-patch probability that `candidate` is a real HR face for `bicubic`.
/// Output is `[N, 1, hr/16, hr/16]`.
pub fn discriminator_forward<T: Element>(
    tape: &mut Tape<T>,
    b: &mut Bound<'_, T>,
    cfg: &NetConfig,
    candidate: Var,
    bicubic: Var,
) -> Result<Var> {
    let hr = cfg.hr_size;
    if hr % PATCH_FACTOR != 0 {
        return Err(config_err!("discriminator needs hr size divisible by 16, got {hr}"));
    }
    for (what, v) in [("candidate", candidate), ("bicubic input", bicubic)] {
        let s = tape.value(v).shape();
        if s.len() != 4 || s[1] != 3 || s[2] != hr || s[3] != hr {
            return Err(config_err!("discriminator {what} must be [N, 3, {hr}, {hr}], got {s:?}"));
        }
    }
    let x = tape.concat_channels(&[candidate, bicubic])?;
    let h = conv(tape, b, "disc.c1", x, 2, 1)?;
    let mut h = tape.leaky_relu(h, LEAKY_SLOPE);
    for stage in 2..=4 {
        let c = conv(tape, b, &format!("disc.c{stage}.conv"), h, 2, 1)?;
        let n = batch_norm(tape, b, &format!("disc.c{stage}.bn"), c)?;
        h = tape.leaky_relu(n, LEAKY_SLOPE);
    }
    let logits = conv(tape, b, "disc.out", h, 1, 1)?;
    Ok(tape.sigmoid(logits))
}

pub fn init_discriminator(cfg: &NetConfig, seed: u64) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    if cfg.hr_size % PATCH_FACTOR != 0 {
        return Err(config_err!("discriminator needs hr size divisible by 16, got {}", cfg.hr_size));
    }
    let d = cfg.disc_base_channels;
    let mut p = ParamInit::new(fingerprint(cfg, Role::Discriminator), ChaCha8Rng::seed_from_u64(seed));
    p.conv("disc.c1", 6, d, 4, true)?;
    init::conv_bn(&mut p, "disc.c2", d, 2 * d, 4)?;
    init::conv_bn(&mut p, "disc.c3", 2 * d, 4 * d, 4)?;
    init::conv_bn(&mut p, "disc.c4", 4 * d, 8 * d, 4)?;
    p.conv("disc.out", 8 * d, 1, 3, true)?;
    Ok(p.finish())
}
