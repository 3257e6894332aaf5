//! Training modes, selected by name.

use crate::error::{config_err, Result};
use crate::nets::{ForwardMode, Layout};

/// One way of training the generator. Modes differ in network layout,
/// whether priors are estimated or given, and which loss terms apply.
pub trait TrainingMode: Send + Sync {
    fn name(&self) -> &'static str;
    fn layout(&self) -> Layout;
    /// Multiplier applied to the configured prior weight.
    fn prior_weight(&self, lambda: f64) -> f64 {
        lambda
    }
    /// Decoder receives ground-truth maps instead of estimates.
    fn feeds_gt_prior(&self) -> bool {
        false
    }
    /// Adds the discriminator and perceptual terms.
    fn adversarial(&self) -> bool {
        false
    }
    fn description(&self) -> &'static str;

    /// Forward mode for a batch; `gt` is the ground-truth prior stack.
    fn forward_mode(&self, gt: Option<facesr_tensor::Var>) -> Result<ForwardMode> {
        if self.feeds_gt_prior() {
            gt.map(ForwardMode::GtPrior)
                .ok_or_else(|| config_err!("{} needs ground-truth prior maps", self.name()))
        } else if self.layout().has_prior_net() && self.prior_weight(1.0) == 0.0 {
            Ok(ForwardMode::NoPriorSupervision)
        } else {
            Ok(ForwardMode::Full)
        }
    }
}

struct FsrNet;
struct FsrGan;
struct BaselineV1;
struct BaselineV2;
struct GtPrior;
struct GtPriorBaseline;

impl TrainingMode for FsrNet {
    fn name(&self) -> &'static str {
        "fsrnet"
    }
    fn layout(&self) -> Layout {
        Layout::Full
    }
    fn description(&self) -> &'static str {
        "coarse net, prior estimation and fine net with prior supervision"
    }
}

impl TrainingMode for FsrGan {
    fn name(&self) -> &'static str {
        "fsrgan"
    }
    fn layout(&self) -> Layout {
        Layout::Full
    }
    fn adversarial(&self) -> bool {
        true
    }
    fn description(&self) -> &'static str {
        "fsrnet objective plus adversarial and perceptual terms"
    }
}

impl TrainingMode for BaselineV1 {
    fn name(&self) -> &'static str {
        "baseline_v1"
    }
    fn layout(&self) -> Layout {
        Layout::NoPrior
    }
    fn description(&self) -> &'static str {
        "prior branch removed"
    }
}

impl TrainingMode for BaselineV2 {
    fn name(&self) -> &'static str {
        "baseline_v2"
    }
    fn layout(&self) -> Layout {
        Layout::Full
    }
    fn prior_weight(&self, _lambda: f64) -> f64 {
        0.0
    }
    fn description(&self) -> &'static str {
        "prior branch kept but unsupervised"
    }
}

impl TrainingMode for GtPrior {
    fn name(&self) -> &'static str {
        "gt_prior"
    }
    fn layout(&self) -> Layout {
        Layout::GtPrior
    }
    fn feeds_gt_prior(&self) -> bool {
        true
    }
    fn description(&self) -> &'static str {
        "ground-truth priors concatenated to the encoder features"
    }
}

impl TrainingMode for GtPriorBaseline {
    fn name(&self) -> &'static str {
        "gt_prior_baseline"
    }
    fn layout(&self) -> Layout {
        Layout::WideBaseline
    }
    fn description(&self) -> &'static str {
        "no priors; encoder widened to the gt_prior concatenation width"
    }
}

pub fn registry() -> Vec<Box<dyn TrainingMode>> {
    vec![
        Box::new(FsrNet),
        Box::new(FsrGan),
        Box::new(BaselineV1),
        Box::new(BaselineV2),
        Box::new(GtPrior),
        Box::new(GtPriorBaseline),
    ]
}

pub fn mode_names() -> Vec<&'static str> {
    registry().iter().map(|m| m.name()).collect()
}

pub fn lookup(name: &str) -> Result<Box<dyn TrainingMode>> {
    registry()
        .into_iter()
        .find(|m| m.name() == name)
        .ok_or_else(|| config_err!("unknown training mode {name:?} (one of {})", mode_names().join(", ")))
}
