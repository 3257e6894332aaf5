//! Central finite-difference verification of backward rules.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the backward code it checks. Coordinates whose `±step` stencil straddles
//! a kink (a ReLU input or a log clamp changing sign) are skipped and
//! counted; the function is not differentiable across them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per differentiated input.
    pub max_coords: Option<usize>,
    /// Seeds the projection vector and the coordinate subsample.
    pub seed: u64,
}

impl GradCheckOptions {
    /// Step sizes used throughout: 1e-3 in f32, 1e-5 in f64.
    pub fn for_element<T: Element>(seed: u64) -> Self {
        let step = if std::mem::size_of::<T>() == 4 { 1e-3 } else { 1e-5 };
        GradCheckOptions {
            step,
            max_coords: None,
            seed,
        }
    }

    /// Tolerance matching [`GradCheckOptions::for_element`].
    pub fn tolerance_for<T: Element>() -> f64 {
        if std::mem::size_of::<T>() == 4 {
            1e-3
        } else {
            1e-6
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|)` over every
    /// checked coordinate of every input.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub grad_scale: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

struct Eval {
    loss: f64,
    signature: Vec<bool>,
}

fn evaluate<T, F>(inputs: &[Tensor<T>], build: &F, projection: Option<&[f64]>) -> Result<Eval>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let values = tape.value(out).data();
    let loss = match projection {
        Some(r) => values.iter().zip(r).map(|(v, r)| v.as_f64() * r).sum(),
        None => values[0].as_f64(),
    };
    Ok(Eval {
        loss,
        signature: tape.kink_signature(),
    })
}

/// Compare the tape's gradient of `<r, build(inputs)>` against central
/// differences. `r` is a seeded random projection for non-scalar outputs
/// and 1 for scalar outputs. `wrt[i]` selects which inputs are checked.
pub fn check<T, F>(inputs: &[Tensor<T>], wrt: &[bool], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check_against(inputs, wrt, &build, &build, opts)
}

/// Like [`check`], but the finite differences come from `reference`, the
/// same function evaluated in element type `U` at the inputs cast to `U`.
/// Checking an f32 tape against f64 differences keeps the numeric side's
/// roundoff and spurious kink crossings out of the comparison.
pub fn check_against<T, U, F, G>(
    inputs: &[Tensor<T>],
    wrt: &[bool],
    build: F,
    reference: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Element,
    U: Element,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    G: Fn(&mut Tape<U>, &[Var]) -> Result<Var>,
{
    assert_eq!(inputs.len(), wrt.len(), "one wrt flag per input");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &w)| if w { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = build(&mut tape, &vars)?;
    let out_len = tape.value(out).numel();
    // Projection weights are rounded to T so both sides use the same values.
    let projection: Option<Vec<f64>> = if out_len == 1 {
        None
    } else {
        Some((0..out_len).map(|_| T::from_f64(rng.gen_range(-1.0..1.0)).as_f64()).collect())
    };
    let loss = match &projection {
        Some(r) => {
            let shape = tape.value(out).shape().to_vec();
            let rv = tape.constant(Tensor::new(shape, r.iter().map(|&v| T::from_f64(v)).collect())?);
            let prod = tape.mul(out, rv)?;
            tape.sum(prod)
        }
        None => out,
    };
    tape.backward(loss)?;

    let mut max_abs = 0.0f64;
    let mut scale = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut work: Vec<Tensor<U>> = inputs.iter().map(|t| t.cast()).collect();
    for (idx, &w) in wrt.iter().enumerate() {
        if !w {
            continue;
        }
        let analytic: Vec<f64> = tape
            .grad(vars[idx])
            .expect("differentiated input has a gradient")
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let n = analytic.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[idx].data()[c];
            work[idx].data_mut()[c] = U::from_f64(orig.as_f64() + opts.step);
            let plus = evaluate(&work, &reference, projection.as_deref())?;
            work[idx].data_mut()[c] = U::from_f64(orig.as_f64() - opts.step);
            let minus = evaluate(&work, &reference, projection.as_deref())?;
            work[idx].data_mut()[c] = orig;
            if plus.signature != minus.signature {
                skipped += 1;
                continue;
            }
            // The actual perturbation after rounding to U.
            let hp = U::from_f64(orig.as_f64() + opts.step).as_f64() - orig.as_f64();
            let hm = orig.as_f64() - U::from_f64(orig.as_f64() - opts.step).as_f64();
            let numeric = (plus.loss - minus.loss) / (hp + hm);
            max_abs = max_abs.max((numeric - analytic[c]).abs());
            scale = scale.max(numeric.abs()).max(analytic[c].abs());
            checked += 1;
        }
    }
    let max_rel_error = if scale > 0.0 { max_abs / scale } else { max_abs };
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error: max_abs,
        grad_scale: scale,
        checked,
        skipped_kinks: skipped,
    })
}
