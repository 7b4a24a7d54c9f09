//! Latent-neighborhood explanations for image classifiers.

pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod error;
pub mod latent;
pub mod neighborhood;
pub mod nn;
pub mod render;
pub mod vae;
pub mod workbench;

pub use error::{Error, Result};
