//! Training objectives.
//!
//! Squared-error terms are means over their elements, so the prior weight
//! balances terms at different resolutions; the FSRNet objective is half
//! the weighted sum of those means.

use facesr_tensor::{Element, Tape, Var};

use crate::error::{config_err, Error, Result};
use crate::nets::{perceptual_forward, Bound, PriorOutput};

/// Clamp applied inside every adversarial log.
pub const LOG_EPS: f64 = 1e-7;

/// Recorded in run metadata.
pub const LOSS_NORMALIZATION: &str =
    "0.5 * (mse(coarse) + mse(fine) + lambda * sum over stacks of mse(prior)); each mse is a per-element mean";

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub coarse: Var,
    pub fine: Var,
    /// Sum over stacks of the prior squared error, before `lambda`.
    pub prior: Option<Var>,
}

/// `0.5 * (mse(y_c, hr) + mse(y, hr) + lambda * sum_s mse(p_s, p_target))`.
/// `prior` and `prior_target` must be both present or both absent.
pub fn fsrnet_loss<T: Element>(
    tape: &mut Tape<T>,
    coarse: Var,
    fine: Var,
    prior: Option<&PriorOutput>,
    hr: Var,
    prior_target: Option<Var>,
    lambda: f64,
) -> Result<LossTerms> {
    if !(lambda >= 0.0) {
        return Err(config_err!("prior weight lambda must be non-negative, got {lambda}"));
    }
    let lc = tape.mse_loss(coarse, hr)?;
    let lf = tape.mse_loss(fine, hr)?;
    let mut total = tape.add(lc, lf)?;
    let prior_term = match (prior, prior_target) {
        (Some(p), Some(target)) => {
            let mut acc: Option<Var> = None;
            for stack in &p.stacks {
                let maps = stack.maps(tape)?;
                let l = tape.mse_loss(maps, target)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            let lp = acc.ok_or_else(|| config_err!("prior output has no stacks"))?;
            let weighted = tape.scale(lp, lambda);
            total = tape.add(total, weighted)?;
            Some(lp)
        }
        (None, None) => None,
        _ => return Err(config_err!("prior estimates and prior targets must be supplied together")),
    };
    let total = tape.scale(total, 0.5);
    Ok(LossTerms {
        total,
        coarse: lc,
        fine: lf,
        prior: prior_term,
    })
}

fn check_probabilities<T: Element>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    let bad = tape
        .value(v)
        .data()
        .iter()
        .any(|p| !(p.as_f64() >= 0.0 && p.as_f64() <= 1.0));
    if bad {
        return Err(Error::Numerical(format!("{what} contains values outside [0, 1]")));
    }
    Ok(())
}

/// `-mean log C(real) - mean log(1 - C(fake))`.
pub fn discriminator_loss<T: Element>(tape: &mut Tape<T>, c_real: Var, c_fake: Var) -> Result<Var> {
    check_probabilities(tape, c_real, "discriminator output on real pairs")?;
    check_probabilities(tape, c_fake, "discriminator output on generated pairs")?;
    let log_real = tape.ln_clamped(c_real, LOG_EPS);
    let real_term = tape.mean(log_real);
    let one_minus = tape.affine(c_fake, -1.0, 1.0);
    let log_fake = tape.ln_clamped(one_minus, LOG_EPS);
    let fake_term = tape.mean(log_fake);
    let sum = tape.add(real_term, fake_term)?;
    Ok(tape.scale(sum, -1.0))
}

/// Generator adversarial term: `-mean log C(fake)`, or with `saturating`
/// the original `mean log(1 - C(fake))`.
pub fn generator_adversarial_loss<T: Element>(tape: &mut Tape<T>, c_fake: Var, saturating: bool) -> Result<Var> {
    check_probabilities(tape, c_fake, "discriminator output on generated pairs")?;
    if saturating {
        let one_minus = tape.affine(c_fake, -1.0, 1.0);
        let l = tape.ln_clamped(one_minus, LOG_EPS);
        Ok(tape.mean(l))
    } else {
        let l = tape.ln_clamped(c_fake, LOG_EPS);
        let m = tape.mean(l);
        Ok(tape.scale(m, -1.0))
    }
}

/// Mean squared distance between extractor features of `y` and `target`.
pub fn perceptual_loss<T: Element>(tape: &mut Tape<T>, phi: &mut Bound<'_, T>, y: Var, target: Var) -> Result<Var> {
    let fy = perceptual_forward(tape, phi, y)?;
    let ft = perceptual_forward(tape, phi, target)?;
    Ok(tape.mse_loss(fy, ft)?)
}
