//! The `grad-check` verification suite: per-primitive finite-difference
//! sweeps plus full losses through the denoiser (with and without control)
//! and the VAE.

use crate::error::Result;
use sdf_core::denoiser::{init_control, init_denoiser, DenoiserConfig};
use sdf_core::diffusion::linear_schedule;
use sdf_core::ops::{self, grad_check, InterpMode};
use sdf_core::text;
use sdf_core::training::diffusion_grad_check;
use sdf_core::vae::{init_vae, vae_grad_check, VaeConfig};
use sdf_core::{Rng, Tensor};

pub struct ComponentResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl ComponentResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn primitive_sweeps() -> Vec<ComponentResult> {
    let mut out = Vec::new();

    let mut worst_conv = 0.0f64;
    for seed in 0..5 {
        let mut rng = Rng::new(100 + seed);
        let input = Tensor::randn(&[1, 2, 5, 5], &mut rng);
        let weight = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let bias = Tensor::randn(&[3], &mut rng);
        let proj = Tensor::randn(&[1, 3, 5, 5], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::conv2d(&xs[0], &xs[1], &xs[2], 1, 1).unwrap();
            let (gi, gw, gb) = ops::conv2d_backward(&xs[0], &xs[1], &proj, 1, 1).unwrap();
            (dot(&y, &proj), vec![gi, gw, gb])
        };
        worst_conv = worst_conv.max(grad_check(&f, &[input, weight, bias], 1e-5));
    }
    out.push(ComponentResult { name: "conv2d", max_rel_err: worst_conv, threshold: 1e-5 });

    let mut worst_lin = 0.0f64;
    for seed in 0..5 {
        let mut rng = Rng::new(200 + seed);
        let input = Tensor::randn(&[3, 4], &mut rng);
        let weight = Tensor::randn(&[2, 4], &mut rng);
        let bias = Tensor::randn(&[2], &mut rng);
        let proj = Tensor::randn(&[3, 2], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::linear(&xs[0], &xs[1], &xs[2]).unwrap();
            let (gi, gw, gb) = ops::linear_backward(&xs[0], &xs[1], &proj).unwrap();
            (dot(&y, &proj), vec![gi, gw, gb])
        };
        worst_lin = worst_lin.max(grad_check(&f, &[input, weight, bias], 1e-5));
    }
    out.push(ComponentResult { name: "linear", max_rel_err: worst_lin, threshold: 1e-5 });

    let mut worst_gn = 0.0f64;
    for seed in 0..5 {
        let mut rng = Rng::new(300 + seed);
        let x = Tensor::randn(&[2, 4, 3, 3], &mut rng);
        let gamma = Tensor::randn(&[4], &mut rng);
        let beta = Tensor::randn(&[4], &mut rng);
        let proj = Tensor::randn(&[2, 4, 3, 3], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::group_norm(&xs[0], 2, &xs[1], &xs[2]).unwrap();
            let (gx, gg, gb) = ops::group_norm_backward(&xs[0], 2, &xs[1], &proj).unwrap();
            (dot(&y, &proj), vec![gx, gg, gb])
        };
        worst_gn = worst_gn.max(grad_check(&f, &[x, gamma, beta], 1e-5));
    }
    out.push(ComponentResult { name: "group_norm", max_rel_err: worst_gn, threshold: 1e-5 });

    let mut worst_silu = 0.0f64;
    for seed in 0..5 {
        let mut rng = Rng::new(400 + seed);
        let x = Tensor::randn(&[13], &mut rng);
        let proj = Tensor::randn(&[13], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::silu(&xs[0]).unwrap();
            let g = ops::silu_backward(&xs[0], &proj).unwrap();
            (dot(&y, &proj), vec![g])
        };
        worst_silu = worst_silu.max(grad_check(&f, &[x], 1e-5));
    }
    out.push(ComponentResult { name: "silu", max_rel_err: worst_silu, threshold: 1e-5 });

    let mut worst_interp = 0.0f64;
    for seed in 0..5 {
        let mut rng = Rng::new(500 + seed);
        let mode = [InterpMode::Nearest, InterpMode::Bilinear][(seed % 2) as usize];
        let x = Tensor::randn(&[1, 2, 3, 4], &mut rng);
        let proj = Tensor::randn(&[1, 2, 6, 8], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::interpolate2d(&xs[0], 2, mode).unwrap();
            let g = ops::interpolate2d_backward(&proj, 2, mode, 3, 4).unwrap();
            (dot(&y, &proj), vec![g])
        };
        worst_interp = worst_interp.max(grad_check(&f, &[x], 1e-5));
    }
    out.push(ComponentResult { name: "interpolate2d", max_rel_err: worst_interp, threshold: 1e-5 });

    out
}

/// Run the whole verification suite; the caller prints and sets the exit
/// code from the results.
pub fn run_suite(seed: u64) -> Result<Vec<ComponentResult>> {
    let mut results = primitive_sweeps();

    let dcfg = DenoiserConfig { latent_channels: 2, base_width: 8, emb_dim: 16, text_dim: 8, cond_channels: 1 };
    let vcfg = VaeConfig { latent_channels: 2, base_width: 4 };
    let schedule = linear_schedule(50, 1e-4, 0.02)?;
    let p = init_denoiser(&dcfg, &mut Rng::with_stream(seed, 1))?;
    let v = init_vae(&vcfg, &mut Rng::with_stream(seed, 2))?;
    let mut rng = Rng::with_stream(seed, 3);
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let images = Tensor::randn(&[2, 1, 32, 32], &mut rng).map(sig);
    let prompts = [
        text::sequence_ids(&text::tokenize(&["field", "bright"])),
        text::sequence_ids(&text::tokenize(&["water", "dark"])),
    ];
    let err = diffusion_grad_check(&p, None, &v, 1.0, &images, &prompts, &schedule, 150, 1e-5, &mut rng)?;
    results.push(ComponentResult { name: "diffusion_loss", max_rel_err: err, threshold: 1e-4 });

    let mut branch = init_control(&p, &mut Rng::with_stream(seed, 4));
    for (name, t) in branch.named_mut() {
        if name.contains("zero") {
            let mut r = Tensor::randn(t.shape(), &mut rng);
            r.scale(0.1);
            *t = r;
        }
    }
    let image = Tensor::randn(&[1, 1, 32, 32], &mut rng).map(sig);
    let cond = Tensor::randn(&[1, 1, 32, 32], &mut rng).map(sig);
    let single = [prompts[0]];
    let err = diffusion_grad_check(
        &p,
        Some((&branch, &cond)),
        &v,
        1.0,
        &image,
        &single,
        &schedule,
        150,
        1e-5,
        &mut rng,
    )?;
    results.push(ComponentResult { name: "diffusion_loss+control", max_rel_err: err, threshold: 1e-4 });

    let x = Tensor::randn(&[1, 1, 16, 16], &mut rng).map(sig);
    let err = vae_grad_check(&v, &x, 1e-4, 150, 1e-5, &mut rng)?;
    results.push(ComponentResult { name: "vae_loss", max_rel_err: err, threshold: 1e-4 });

    Ok(results)
}
