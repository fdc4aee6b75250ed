//! Frequency-guided, coarse-to-fine conditional diffusion for many-to-many
//! synthesis of missing MRI modalities, at desk scale.

pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod frequency;
pub mod image;
pub mod metrics;
pub mod numerics;
pub mod phantoms;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
