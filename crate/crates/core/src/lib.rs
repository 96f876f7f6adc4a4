//! Core numerics for a desk-scale latent-diffusion stack over SAR-like imagery.
//!
//! Everything in this crate is pure computation over owned buffers: dense
//! tensors with hand-written forward/backward passes, DDPM noise schedules and
//! samplers, a small conditional U-net denoiser with a zero-initialized control
//! branch, a ×8 VAE, LoRA adapters, classic condition extractors (Canny, tile
//! blur), speckled scene synthesis, and the multi-stage upscaling executor.
//! File formats, checkpoints, and the CLI live in the companion `sdf-cli`
//! crate; this crate is `no_std` (alloc only) and fully deterministic.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod lora;
pub(crate) mod math;
pub mod ops;
pub mod pipeline;
pub mod rng;
pub mod sar;
pub mod stats;
pub mod tensor;
pub mod text;
pub mod training;
pub mod vae;

pub use error::{CoreError, Result};
pub use rng::Rng;
pub use tensor::Tensor;
