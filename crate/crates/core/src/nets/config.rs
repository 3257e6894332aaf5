use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::fingerprint_of;

/// Which facial priors the prior branch estimates and the decoder consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSet {
    Landmarks,
    Parsing,
    Both,
}

impl PriorSet {
    pub fn landmarks(self) -> bool {
        matches!(self, PriorSet::Landmarks | PriorSet::Both)
    }

    pub fn parsing(self) -> bool {
        matches!(self, PriorSet::Parsing | PriorSet::Both)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "landmarks" => Ok(PriorSet::Landmarks),
            "parsing" => Ok(PriorSet::Parsing),
            "both" => Ok(PriorSet::Both),
            other => Err(config_err!("unknown prior set {other:?} (landmarks|parsing|both)")),
        }
    }
}

/// Architecture hyper-parameters shared by every network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hr_size: usize,
    pub scale_factor: usize,
    pub base_channels: usize,
    pub num_coarse_res_blocks: usize,
    pub num_encoder_res_blocks: usize,
    pub num_decoder_res_blocks: usize,
    pub num_hourglass: usize,
    /// Down/up-sampling levels inside each hourglass.
    pub hourglass_levels: usize,
    pub num_landmarks: usize,
    pub num_parsing_maps: usize,
    pub priors: PriorSet,
    /// Width of the first discriminator stage; later stages double it.
    pub disc_base_channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Start every residual block's second batch-norm scale at zero so each
    /// block begins as the identity.
    pub zero_init_residual_gamma: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hr_size: 64,
            scale_factor: 8,
            base_channels: 64,
            num_coarse_res_blocks: 3,
            num_encoder_res_blocks: 12,
            num_decoder_res_blocks: 3,
            num_hourglass: 2,
            hourglass_levels: 3,
            num_landmarks: 5,
            num_parsing_maps: 5,
            priors: PriorSet::Both,
            disc_base_channels: 64,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            zero_init_residual_gamma: true,
        }
    }
}

impl NetConfig {
    /// Full-size geometry: 128 x 128 outputs.
    pub fn paper_scale() -> Self {
        NetConfig {
            hr_size: 128,
            ..Self::default()
        }
    }

    pub fn prior_spatial(&self) -> usize {
        self.hr_size / 2
    }

    pub fn lr_size(&self) -> usize {
        self.hr_size / self.scale_factor
    }

    /// Channels of the stacked landmark + parsing maps.
    pub fn prior_channels(&self) -> usize {
        self.priors.landmarks() as usize * self.num_landmarks + self.priors.parsing() as usize * self.num_parsing_maps
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_factor < 2 {
            return Err(config_err!("scale factor must be at least 2"));
        }
        if self.hr_size % self.scale_factor != 0 {
            return Err(config_err!(
                "hr size {} is not divisible by scale factor {}",
                self.hr_size,
                self.scale_factor
            ));
        }
        if self.hr_size % 2 != 0 || self.hr_size < 8 {
            return Err(config_err!("hr size {} must be even and at least 8", self.hr_size));
        }
        if ![1, 2, 4].contains(&self.num_hourglass) {
            return Err(config_err!("hourglass count {} not in {{1, 2, 4}}", self.num_hourglass));
        }
        let bottom_div = 1usize << self.hourglass_levels;
        if self.hourglass_levels == 0
            || self.prior_spatial() % bottom_div != 0
            || self.prior_spatial() / bottom_div < 2
        {
            return Err(config_err!(
                "prior resolution {} cannot be halved {} times down to at least 2x2",
                self.prior_spatial(),
                self.hourglass_levels
            ));
        }
        if self.base_channels == 0 || self.disc_base_channels == 0 {
            return Err(config_err!("channel widths must be positive"));
        }
        if self.priors.landmarks() && self.num_landmarks == 0 {
            return Err(config_err!("landmark priors requested with zero landmarks"));
        }
        if self.priors.parsing() && self.num_parsing_maps == 0 {
            return Err(config_err!("parsing priors requested with zero parsing maps"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(config_err!("batch-norm eps must be positive and momentum in [0, 1)"));
        }
        Ok(())
    }
}

/// Generator structure. Each training mode picks one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Coarse net, encoder, prior estimation branch and decoder. The decoder
    /// receives the final shared prior feature plus both heads.
    Full,
    /// Prior branch removed; decoder sees image features only.
    NoPrior,
    /// No prior branch; ground-truth maps are concatenated to the features.
    GtPrior,
    /// Prior-free control whose encoder is widened by the prior channel count
    /// so the concatenation layer keeps the `GtPrior` width.
    WideBaseline,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Full => "full",
            Layout::NoPrior => "no_prior",
            Layout::GtPrior => "gt_prior",
            Layout::WideBaseline => "wide_baseline",
        }
    }

    pub fn has_prior_net(self) -> bool {
        self == Layout::Full
    }

    pub fn encoder_width(self, cfg: &NetConfig) -> usize {
        match self {
            Layout::WideBaseline => cfg.base_channels + cfg.prior_channels(),
            _ => cfg.base_channels,
        }
    }

    /// Channels concatenated to the encoder features before decoding.
    pub fn decoder_prior_channels(self, cfg: &NetConfig) -> usize {
        match self {
            Layout::Full => cfg.base_channels + cfg.prior_channels(),
            Layout::GtPrior => cfg.prior_channels(),
            Layout::NoPrior | Layout::WideBaseline => 0,
        }
    }

    pub fn decoder_input_channels(self, cfg: &NetConfig) -> usize {
        self.encoder_width(cfg) + self.decoder_prior_channels(cfg)
    }
}

/// Role of a parameter set, mixed into its fingerprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Generator(Layout),
    Discriminator,
    Perceptual,
}

pub const CODE_VERSION: &str = concat!("facesr-", env!("CARGO_PKG_VERSION"));

/// Architecture fingerprint stored in checkpoints.
pub fn fingerprint(cfg: &NetConfig, role: Role) -> u64 {
    let role_desc = match role {
        Role::Generator(layout) => format!("generator/{}/prior-feed=shared+heads", layout.name()),
        Role::Discriminator => "discriminator/widths=x1,x2,x4,x8".to_string(),
        Role::Perceptual => "perceptual/5-conv-relu/16,32,32,64,64".to_string(),
    };
    let desc = serde_json::json!({
        "version": CODE_VERSION,
        "role": role_desc,
        "net": cfg,
    });
    fingerprint_of(desc.to_string().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_divisibility_is_checked() {
        NetConfig::default().validate().unwrap();
        NetConfig::paper_scale().validate().unwrap();
        let bad = NetConfig {
            hr_size: 60,
            ..NetConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_h = NetConfig {
            num_hourglass: 3,
            ..NetConfig::default()
        };
        assert!(bad_h.validate().is_err());
    }

    #[test]
    fn channel_matched_layouts_agree() {
        let cfg = NetConfig::default();
        assert_eq!(
            Layout::GtPrior.decoder_input_channels(&cfg),
            Layout::WideBaseline.decoder_input_channels(&cfg)
        );
        assert_eq!(Layout::Full.decoder_input_channels(&cfg), 64 + 64 + 10);
    }

    #[test]
    fn fingerprints_separate_layouts() {
        let cfg = NetConfig::default();
        assert_ne!(
            fingerprint(&cfg, Role::Generator(Layout::Full)),
            fingerprint(&cfg, Role::Generator(Layout::NoPrior))
        );
        assert_eq!(
            fingerprint(&cfg, Role::Discriminator),
            fingerprint(&cfg.clone(), Role::Discriminator)
        );
    }
}
