//! Jointly trained, regularized transformer autoencoder for protein fitness
//! landscapes, with latent-space and sequence-space optimizers.

pub mod diffcore;
pub mod evalmetrics;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optimizers;
pub mod rng;
pub mod seqdata;
pub mod trainer;

pub use error::{Error, Result};
