//! Objectives, optimizer, training modes and the training loop.

pub mod loss;
pub mod modes;
pub mod optim;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub use loss::{discriminator_loss, fsrnet_loss, generator_adversarial_loss, perceptual_loss, LossTerms};
pub use modes::{lookup as lookup_mode, mode_names, TrainingMode};
pub use optim::RmsProp;
pub use trainer::{
    read_checkpoint_state, run_training, CheckpointState, StepRecord, TrainState, TrainSummary, Trainer, DISCRIMINATOR_FILE,
    GENERATOR_FILE, LOG_FILE, OPTIMIZER_FILE, STATE_FILE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Prior term weight.
    pub lambda_prior: f64,
    /// Adversarial term weight.
    pub gamma_c: f64,
    /// Perceptual term weight.
    pub gamma_p: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Random rotations/flips of training samples.
    pub augment: bool,
    /// Use `log(1 - C(fake))` for the generator instead of `-log C(fake)`.
    pub saturating_gan: bool,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Generator checkpoint (file or checkpoint directory) to start from
    /// instead of random weights.
    pub warm_start: Option<String>,
    /// Train only the discriminator (diagnostics).
    pub freeze_generator: bool,
    pub perceptual_seed: u64,
    /// Training batches used to recompute the generator's batch-norm running
    /// statistics from the final weights; 0 keeps the training-time averages.
    pub bn_refresh_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: "fsrnet".to_string(),
            learning_rate: 2.5e-4,
            batch_size: 8,
            lambda_prior: 1.0,
            gamma_c: 1e-3,
            gamma_p: 1e-1,
            rmsprop_decay: optim::DEFAULT_DECAY,
            rmsprop_eps: optim::DEFAULT_EPS,
            max_steps: 2000,
            seed: 1,
            augment: true,
            saturating_gan: false,
            checkpoint_every: 0,
            warm_start: None,
            freeze_generator: false,
            perceptual_seed: 1234,
            bn_refresh_batches: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        modes::lookup(&self.mode)?;
        if !(self.learning_rate >= 0.0) {
            return Err(config_err!("learning rate must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        for (name, v) in [
            ("lambda_prior", self.lambda_prior),
            ("gamma_c", self.gamma_c),
            ("gamma_p", self.gamma_p),
        ] {
            if !(v >= 0.0) {
                return Err(config_err!("{name} must be non-negative, got {v}"));
            }
        }
        RmsProp::new(self.rmsprop_decay, self.rmsprop_eps)?;
        Ok(())
    }
}
