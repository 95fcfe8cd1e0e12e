//! Joint image-restoration and object-detection learning for scenes
//! degraded by scattering media (fog, haze), with a paired-image training
//! pipeline, synthetic degradation tooling, and evaluation utilities.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datakit;
pub mod detection;
pub mod dtfe;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod nn;
pub mod raster;
pub mod restoration;
pub mod training;
pub mod weathersim;

pub use error::{Error, Result};
