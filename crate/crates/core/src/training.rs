//! Optimization pieces: the diffusion training loss (ε-prediction MSE),
//! bias-corrected Adam, and global-norm gradient clipping.

use crate::denoiser::{self, ControlBranch, ControlSpec, DenoiserParams, TextInput, TokenSeq};
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vae::{self, VaeParams};
use alloc::vec::Vec;

pub const DEFAULT_ADAM_BETA1: f64 = 0.9;
pub const DEFAULT_ADAM_BETA2: f64 = 0.999;
pub const DEFAULT_ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP_NORM: f64 = 1.0;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second-moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| p.zeros_like()).collect(),
            v: params.iter().map(|p| p.zeros_like()).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Standard bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid(
            "adam_step",
            alloc::format!("{} params vs {} grads vs {} slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - math::powf(beta1, t as f64);
    let bc2 = 1.0 - math::powf(beta2, t as f64);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if !p.same_shape(g) {
            return Err(invalid("adam_step", "parameter/gradient shape mismatch"));
        }
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (math::sqrt(vhat) + eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g.data() {
            sq += v * v;
        }
    }
    let norm = math::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// diffusion loss
// ---------------------------------------------------------------------------

/// Mean squared error between true and predicted noise, averaged over every
/// element of the batch.
pub fn noise_mse(eps: &Tensor, eps_hat: &Tensor) -> f64 {
    let n = eps.numel() as f64;
    eps.data()
        .iter()
        .zip(eps_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Uniform timestep draw over 1..=T.
pub fn draw_timestep(rng: &mut Rng, t_count: usize) -> usize {
    1 + rng.next_below(t_count as u64) as usize
}

pub struct DiffusionLossReport {
    pub loss: f64,
    pub timesteps: Vec<usize>,
}

/// ε-prediction loss over pre-encoded, pre-scaled latents: corrupt each
/// sample at its own uniform timestep and score the denoiser's estimate.
/// Returns trunk grads and, when a control branch is attached (condition
/// images required), its grads too.
pub fn diffusion_loss_latents(
    p: &DenoiserParams,
    control: Option<(&ControlBranch, &Tensor)>,
    z0: &Tensor,
    prompts: &[TokenSeq],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(DiffusionLossReport, DenoiserParams, Option<ControlBranch>)> {
    let (b, lc, lh, lw) = z0.dims4()?;
    if prompts.len() != b {
        return Err(invalid(
            "diffusion_loss",
            alloc::format!("{} prompts for batch of {b}", prompts.len()),
        ));
    }
    let per = lc * lh * lw;
    let mut ts = Vec::with_capacity(b);
    let eps = Tensor::randn(z0.shape(), rng);
    let mut z_t = z0.clone();
    for bi in 0..b {
        let t = draw_timestep(rng, schedule.len());
        ts.push(t);
        let ab = schedule.alpha_bar(t);
        let (c0, c1) = (math::sqrt(ab), math::sqrt(1.0 - ab));
        for i in bi * per..(bi + 1) * per {
            z_t.data_mut()[i] = c0 * z0.data()[i] + c1 * eps.data()[i];
        }
    }

    let spec_holder;
    let controls: Vec<(&ControlBranch, &ControlSpec, bool)> = match control {
        Some((branch, cond)) => {
            spec_holder = ControlSpec { cond: cond.clone(), strength: 1.0, end_percent: 1.0 };
            alloc::vec![(branch, &spec_holder, true)]
        }
        None => Vec::new(),
    };

    let (eps_hat, cache) = denoiser::forward(p, &z_t, &ts, &TextInput::Sequences(prompts), &controls, true)?;
    let cache = cache.unwrap();
    let loss = noise_mse(&eps, &eps_hat);

    let n = eps.numel() as f64;
    let mut dout = eps_hat.clone();
    for (d, e) in dout.data_mut().iter_mut().zip(eps.data()) {
        *d = 2.0 * (*d - e) / n;
    }
    let (grads, mut control_grads, _) = denoiser::backward(p, &controls, &cache, &dout)?;
    let cg = if control.is_some() { Some(control_grads.remove(0)) } else { None };
    Ok((DiffusionLossReport { loss, timesteps: ts }, grads, cg))
}

/// ε-prediction loss over a pixel batch: encode deterministically through
/// the frozen VAE, scale latents to ~unit variance, then defer to
/// [`diffusion_loss_latents`].
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    p: &DenoiserParams,
    control: Option<(&ControlBranch, &Tensor)>,
    vae_params: &VaeParams,
    latent_scale: f64,
    images: &Tensor,
    prompts: &[TokenSeq],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(DiffusionLossReport, DenoiserParams, Option<ControlBranch>)> {
    let mut z0 = vae::encode(vae_params, images, rng, false)?;
    z0.scale(latent_scale);
    diffusion_loss_latents(p, control, &z0, prompts, schedule, rng)
}

/// Central-difference probe of `diffusion_loss` gradients (trunk plus
/// optional control branch) on randomly selected parameters. The rng value
/// is frozen so every evaluation sees the same (t, ε) draws.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_grad_check(
    p: &DenoiserParams,
    control: Option<(&ControlBranch, &Tensor)>,
    vae_params: &VaeParams,
    latent_scale: f64,
    images: &Tensor,
    prompts: &[TokenSeq],
    schedule: &NoiseSchedule,
    max_probes: usize,
    eps_fd: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = *rng;
    let (_, grads, cgrads) = diffusion_loss(
        p,
        control,
        vae_params,
        latent_scale,
        images,
        prompts,
        schedule,
        &mut draw.clone(),
    )?;
    let trunk_named = grads.named();
    let branch_named = cgrads.as_ref().map(|g| g.named()).unwrap_or_default();
    let trunk_sizes: Vec<usize> = trunk_named.iter().map(|(_, t)| t.numel()).collect();
    let branch_sizes: Vec<usize> = branch_named.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = trunk_sizes.iter().chain(branch_sizes.iter()).sum();

    let mut worst = 0.0f64;
    for _ in 0..max_probes.min(total) {
        let flat = rng.next_below(total as u64) as usize;
        let mut rest = flat;
        let mut located = None;
        for (i, sz) in trunk_sizes.iter().enumerate() {
            if rest < *sz {
                located = Some((false, i, rest));
                break;
            }
            rest -= sz;
        }
        if located.is_none() {
            for (i, sz) in branch_sizes.iter().enumerate() {
                if rest < *sz {
                    located = Some((true, i, rest));
                    break;
                }
                rest -= sz;
            }
        }
        let (in_branch, ti, ei) = located.unwrap();
        let analytic = if in_branch {
            branch_named[ti].1.data()[ei]
        } else {
            trunk_named[ti].1.data()[ei]
        };
        let eval = |delta: f64| -> Result<f64> {
            let mut pp = p.clone();
            let mut bb = control.map(|(br, _)| br.clone());
            if in_branch {
                let mut nm = bb.as_mut().unwrap().named_mut();
                nm[ti].1.data_mut()[ei] += delta;
            } else {
                let mut nm = pp.named_mut();
                nm[ti].1.data_mut()[ei] += delta;
            }
            let ctl = match (&bb, control) {
                (Some(br), Some((_, cond))) => Some((br as &ControlBranch, cond)),
                _ => None,
            };
            let (report, _, _) = diffusion_loss(
                &pp,
                ctl,
                vae_params,
                latent_scale,
                images,
                prompts,
                schedule,
                &mut draw.clone(),
            )?;
            Ok(report.loss)
        };
        let fp = eval(eps_fd)?;
        let fm = eval(-eps_fd)?;
        let central = (fp - fm) / (2.0 * eps_fd);
        let rel = math::abs(analytic - central) / (math::abs(analytic) + math::abs(central) + 1e-12);
        worst = math::maxf(worst, rel);
    }
    Ok(worst)
}
