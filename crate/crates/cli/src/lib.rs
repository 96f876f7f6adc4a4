//! IO, file formats, configuration, and run drivers around `sdf-core`.
//!
//! Everything with a filesystem or clock dependency lives here: PGM/PNG
//! image IO, the shared checkpoint container, JSON configs, dataset
//! generation, the training/sampling/upscaling drivers, and run manifests.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalstats;
pub mod fsutil;
pub mod gradcheck;
pub mod manifest;
pub mod pgm;
pub mod pngout;
pub mod sampler;
pub mod trainer;
pub mod upscale;

pub use error::{CliError, Result};
