//! Transformer autoencoder with a fitness head.

mod checkpoint;
mod config;
mod network;
mod spectral;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, Preset};
pub use network::*;
pub use spectral::{power_step, spectral_norm};

#[cfg(test)]
pub(crate) mod tests;
