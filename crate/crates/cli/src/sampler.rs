//! Batch generation driver: independent reverse chains with per-chain rng
//! streams, run in parallel and collected in chain order.

use crate::error::{CliError, Result};
use rayon::prelude::*;
use sdf_core::denoiser::{ConditionedDenoiser, DenoiserParams, TokenSeq};
use sdf_core::diffusion::{sample, NoiseSchedule, VarianceMode};
use sdf_core::vae::{decode, VaeParams};
use sdf_core::{Rng, Tensor};

pub enum PromptSource {
    Fixed(TokenSeq),
    Pool(Vec<TokenSeq>),
}

pub struct SampleRequest {
    pub count: usize,
    pub steps: usize,
    pub latent_hw: (usize, usize),
    pub seed: u64,
    pub threads: usize,
}

/// Generate `count` decoded images; chain k is a pure function of
/// (seed, k), so the output is identical for any thread count.
pub fn generate(
    denoiser: &DenoiserParams,
    schedule: &NoiseSchedule,
    mode: VarianceMode,
    vae: &VaeParams,
    latent_scale: f64,
    prompts: &PromptSource,
    req: &SampleRequest,
) -> Result<Vec<Tensor>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.threads.max(1))
        .build()
        .map_err(|e| CliError::Run(format!("thread pool: {e}")))?;
    let shape = [
        1,
        denoiser.config.latent_channels,
        req.latent_hw.0,
        req.latent_hw.1,
    ];
    let results: Vec<Result<Tensor>> = pool.install(|| {
        (0..req.count)
            .into_par_iter()
            .map(|k| {
                let mut rng = Rng::with_stream(req.seed, 0x5A3F_0000 + k as u64);
                let prompt = match prompts {
                    PromptSource::Fixed(p) => *p,
                    PromptSource::Pool(pool) => pool[rng.next_below(pool.len() as u64) as usize],
                };
                let model = ConditionedDenoiser { params: denoiser, prompt, controls: Vec::new() };
                let mut z = sample(&model, &shape, req.steps, schedule, &mut rng, mode, None)?;
                z.scale(1.0 / latent_scale);
                Ok(decode(vae, &z)?)
            })
            .collect()
    });
    results.into_iter().collect()
}
