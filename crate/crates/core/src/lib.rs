pub mod ablate;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod params;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use params::ModelParams;
pub mod verify;
