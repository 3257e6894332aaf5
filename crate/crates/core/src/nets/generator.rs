//! Coarse SR net, prior estimation branch, fine encoder and decoder.

use facesr_tensor::{Element, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{fingerprint, Layout, NetConfig, Role};
use super::layers::{batch_norm, conv, conv_bn_relu, deconv, init, residual_block, Bound};
use crate::error::{config_err, Result};
use crate::params::{ModelParams, ParamInit};

/// Head outputs of one hourglass stack.
#[derive(Clone, Copy, Debug)]
pub struct StackOutput {
    pub heatmaps: Option<Var>,
    pub parsing: Option<Var>,
}

impl StackOutput {
    /// Present heads concatenated in (landmarks, parsing) order; this is the
    /// layout ground-truth prior tensors use as well.
    pub fn maps<T: Element>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let parts: Vec<Var> = self.heatmaps.iter().chain(self.parsing.iter()).copied().collect();
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(tape.concat_channels(&parts)?)
    }
}

#[derive(Clone, Debug)]
pub struct PriorOutput {
    /// One entry per hourglass stack, first to last.
    pub stacks: Vec<StackOutput>,
    /// Final stack's shared feature before the heads.
    pub feature: Var,
}

impl PriorOutput {
    pub fn last(&self) -> StackOutput {
        *self.stacks.last().expect("at least one stack")
    }

    /// Tensor the decoder consumes: shared feature then head maps.
    pub fn decoder_input<T: Element>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let last = self.last();
        let mut parts = vec![self.feature];
        parts.extend(last.heatmaps);
        parts.extend(last.parsing);
        Ok(tape.concat_channels(&parts)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ForwardMode {
    /// Estimate priors and feed them to the decoder.
    Full,
    /// Feed the supplied maps to the decoder and skip the prior branch.
    GtPrior(Var),
    /// Same graph as `Full`; the caller drops the prior loss.
    NoPriorSupervision,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub coarse: Var,
    pub prior: Option<PriorOutput>,
    pub fine: Var,
}

fn check_image<T: Element>(tape: &Tape<T>, x: Var, cfg: &NetConfig, what: &str) -> Result<()> {
    let s = tape.value(x).shape();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.hr_size || s[3] != cfg.hr_size {
        return Err(config_err!(
            "{what} must be [N, 3, {0}, {0}], got {s:?}",
            cfg.hr_size
        ));
    }
    Ok(())
}

pub fn coarse_forward<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, cfg: &NetConfig, x: Var) -> Result<Var> {
    check_image(tape, x, cfg, "coarse input")?;
    let mut h = conv_bn_relu(tape, b, "coarse.in", x, 1, 1)?;
    for i in 0..cfg.num_coarse_res_blocks {
        h = residual_block(tape, b, &format!("coarse.res{i}"), h)?;
    }
    conv(tape, b, "coarse.out", h, 1, 1)
}

fn hourglass<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, prefix: &str, level: usize, x: Var) -> Result<Var> {
    let p = format!("{prefix}.l{level}");
    let up1 = residual_block(tape, b, &format!("{p}.up1"), x)?;
    let low = tape.downsample_nearest(x, 2)?;
    let low1 = residual_block(tape, b, &format!("{p}.low1"), low)?;
    let low2 = if level > 1 {
        hourglass(tape, b, prefix, level - 1, low1)?
    } else {
        residual_block(tape, b, &format!("{p}.low2"), low1)?
    };
    let low3 = residual_block(tape, b, &format!("{p}.low3"), low2)?;
    let up2 = tape.upsample_nearest(low3, 2)?;
    Ok(tape.add(up1, up2)?)
}

pub fn prior_forward<T: Element>(
    tape: &mut Tape<T>,
    b: &mut Bound<'_, T>,
    cfg: &NetConfig,
    coarse: Var,
) -> Result<PriorOutput> {
    check_image(tape, coarse, cfg, "prior input")?;
    let stem = conv_bn_relu(tape, b, "prior.stem", coarse, 2, 1)?;
    let mut x = residual_block(tape, b, "prior.stem.res", stem)?;
    let mut stacks = Vec::with_capacity(cfg.num_hourglass);
    let mut feature = x;
    for s in 0..cfg.num_hourglass {
        let hg = hourglass(tape, b, &format!("prior.hg{s}"), cfg.hourglass_levels, x)?;
        let r = residual_block(tape, b, &format!("prior.s{s}.res"), hg)?;
        feature = conv_bn_relu(tape, b, &format!("prior.s{s}.post"), r, 1, 0)?;
        let head = |tape: &mut Tape<T>, b: &mut Bound<'_, T>, name: &str| -> Result<Var> {
            let logits = conv(tape, b, &format!("prior.s{s}.{name}"), feature, 1, 0)?;
            Ok(tape.sigmoid(logits))
        };
        let heatmaps = if cfg.priors.landmarks() { Some(head(tape, b, "heat")?) } else { None };
        let parsing = if cfg.priors.parsing() { Some(head(tape, b, "parse")?) } else { None };
        stacks.push(StackOutput { heatmaps, parsing });
        if s + 1 < cfg.num_hourglass {
            let remap = conv(tape, b, &format!("prior.s{s}.remap"), feature, 1, 0)?;
            x = tape.add(x, remap)?;
        }
    }
    Ok(PriorOutput { stacks, feature })
}

pub fn encoder_forward<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, cfg: &NetConfig, coarse: Var) -> Result<Var> {
    check_image(tape, coarse, cfg, "encoder input")?;
    let mut f = conv_bn_relu(tape, b, "fine.enc.in", coarse, 2, 1)?;
    for i in 0..cfg.num_encoder_res_blocks {
        f = residual_block(tape, b, &format!("fine.enc.res{i}"), f)?;
    }
    Ok(f)
}

/// Decodes encoder features, concatenated with `prior` when present.
pub fn decoder_forward<T: Element>(
    tape: &mut Tape<T>,
    b: &mut Bound<'_, T>,
    cfg: &NetConfig,
    features: Var,
    prior: Option<Var>,
) -> Result<Var> {
    let input = match prior {
        Some(p) => tape.concat_channels(&[features, p])?,
        None => features,
    };
    let reduced = conv_bn_relu(tape, b, "fine.dec.reduce", input, 1, 1)?;
    let up = deconv(tape, b, "fine.dec.up.conv", reduced, 2, 1)?;
    let up = batch_norm(tape, b, "fine.dec.up.bn", up)?;
    let mut h = tape.relu(up);
    for i in 0..cfg.num_decoder_res_blocks {
        h = residual_block(tape, b, &format!("fine.dec.res{i}"), h)?;
    }
    conv(tape, b, "fine.dec.out", h, 1, 1)
}

/// Full generator: coarse estimate, optional priors, fine estimate.
pub fn generator_forward<T: Element>(
    tape: &mut Tape<T>,
    b: &mut Bound<'_, T>,
    cfg: &NetConfig,
    layout: Layout,
    x: Var,
    mode: ForwardMode,
) -> Result<GeneratorOutput> {
    if let (Layout::GtPrior, ForwardMode::Full | ForwardMode::NoPriorSupervision) = (layout, mode) {
        return Err(config_err!("gt_prior layout needs ground-truth prior maps"));
    }
    if let (Layout::NoPrior | Layout::WideBaseline, ForwardMode::GtPrior(_)) = (layout, mode) {
        return Err(config_err!("{} layout takes no prior maps", layout.name()));
    }
    let coarse = coarse_forward(tape, b, cfg, x)?;
    let features = encoder_forward(tape, b, cfg, coarse)?;
    let (prior, prior_in) = match mode {
        ForwardMode::GtPrior(p) => {
            let want = layout.decoder_prior_channels(cfg);
            let s = tape.value(p).shape();
            let side = cfg.prior_spatial();
            if s.len() != 4 || s[1] != want || s[2] != side || s[3] != side {
                return Err(config_err!(
                    "prior maps must be [N, {want}, {side}, {side}], got {s:?}"
                ));
            }
            (None, Some(p))
        }
        ForwardMode::Full | ForwardMode::NoPriorSupervision if layout.has_prior_net() => {
            let out = prior_forward(tape, b, cfg, coarse)?;
            let p = out.decoder_input(tape)?;
            (Some(out), Some(p))
        }
        _ => (None, None),
    };
    let fine = decoder_forward(tape, b, cfg, features, prior_in)?;
    Ok(GeneratorOutput { coarse, prior, fine })
}

fn init_hourglass(p: &mut ParamInit<ChaCha8Rng>, prefix: &str, level: usize, width: usize) -> Result<()> {
    let l = format!("{prefix}.l{level}");
    init::residual_block(p, &format!("{l}.up1"), width)?;
    init::residual_block(p, &format!("{l}.low1"), width)?;
    if level > 1 {
        init_hourglass(p, prefix, level - 1, width)?;
    } else {
        init::residual_block(p, &format!("{l}.low2"), width)?;
    }
    init::residual_block(p, &format!("{l}.low3"), width)
}

/// Seeded generator parameters for `layout`.
pub fn init_generator(cfg: &NetConfig, layout: Layout, seed: u64) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let b = cfg.base_channels;
    let mut p = ParamInit::new(fingerprint(cfg, Role::Generator(layout)), ChaCha8Rng::seed_from_u64(seed));
    init::conv_bn(&mut p, "coarse.in", 3, b, 3)?;
    for i in 0..cfg.num_coarse_res_blocks {
        init::residual_block(&mut p, &format!("coarse.res{i}"), b)?;
    }
    p.conv("coarse.out", b, 3, 3, true)?;

    let e = layout.encoder_width(cfg);
    init::conv_bn(&mut p, "fine.enc.in", 3, e, 3)?;
    for i in 0..cfg.num_encoder_res_blocks {
        init::residual_block(&mut p, &format!("fine.enc.res{i}"), e)?;
    }

    if layout.has_prior_net() {
        init::conv_bn(&mut p, "prior.stem", 3, b, 3)?;
        init::residual_block(&mut p, "prior.stem.res", b)?;
        for s in 0..cfg.num_hourglass {
            init_hourglass(&mut p, &format!("prior.hg{s}"), cfg.hourglass_levels, b)?;
            init::residual_block(&mut p, &format!("prior.s{s}.res"), b)?;
            init::conv_bn(&mut p, &format!("prior.s{s}.post"), b, b, 1)?;
            if cfg.priors.landmarks() {
                p.conv(&format!("prior.s{s}.heat"), b, cfg.num_landmarks, 1, true)?;
            }
            if cfg.priors.parsing() {
                p.conv(&format!("prior.s{s}.parse"), b, cfg.num_parsing_maps, 1, true)?;
            }
            if s + 1 < cfg.num_hourglass {
                p.conv(&format!("prior.s{s}.remap"), b, b, 1, true)?;
            }
        }
    }

    init::conv_bn(&mut p, "fine.dec.reduce", layout.decoder_input_channels(cfg), b, 3)?;
    p.deconv("fine.dec.up.conv", b, b, 4, false)?;
    p.batch_norm("fine.dec.up.bn", b)?;
    for i in 0..cfg.num_decoder_res_blocks {
        init::residual_block(&mut p, &format!("fine.dec.res{i}"), b)?;
    }
    p.conv("fine.dec.out", b, 3, 3, true)?;
    let mut params = p.finish();
    if cfg.zero_init_residual_gamma {
        for (name, t) in params.iter_mut() {
            if name.ends_with(".bn2.weight") {
                *t = t.map(|_| 0.0);
            }
        }
    }
    Ok(params)
}
