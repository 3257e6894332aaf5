pub mod config;
pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod perceptual;

pub use config::{fingerprint, Layout, NetConfig, PriorSet, Role, CODE_VERSION};
pub use discriminator::{discriminator_forward, init_discriminator};
pub use generator::{
    coarse_forward, decoder_forward, encoder_forward, generator_forward, init_generator, prior_forward, ForwardMode,
    GeneratorOutput, PriorOutput, StackOutput,
};
pub use layers::{Bound, Phase};
pub use perceptual::{init_perceptual, perceptual_forward};
