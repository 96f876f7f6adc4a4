//! Gradient verification sweep: every layer primitive against central finite
//! differences over many random shapes, plus full losses through the
//! networks (with and without the control branch).

use sdf_core::denoiser::{init_control, init_denoiser, DenoiserConfig};
use sdf_core::diffusion::linear_schedule;
use sdf_core::ops::{self, grad_check, InterpMode};
use sdf_core::rng::Rng;
use sdf_core::tensor::Tensor;
use sdf_core::text;
use sdf_core::training::diffusion_grad_check;
use sdf_core::vae::{init_vae, vae_grad_check, VaeConfig};

const PRIMITIVE_TOL: f64 = 1e-5;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn conv2d_gradients_over_random_shapes() {
    for seed in 0..20 {
        let mut rng = Rng::new(1000 + seed);
        let b = 1 + rng.next_below(2) as usize;
        let cin = 1 + rng.next_below(3) as usize;
        let cout = 1 + rng.next_below(3) as usize;
        let k = [1usize, 3][rng.next_below(2) as usize];
        let stride = 1 + rng.next_below(2) as usize;
        let pad = k / 2;
        let h = 4 + rng.next_below(3) as usize;
        let w = 4 + rng.next_below(3) as usize;
        let input = Tensor::randn(&[b, cin, h, w], &mut rng);
        let weight = Tensor::randn(&[cout, cin, k, k], &mut rng);
        let bias = Tensor::randn(&[cout], &mut rng);
        let out = ops::conv2d(&input, &weight, &bias, stride, pad).unwrap();
        let proj = Tensor::randn(out.shape(), &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::conv2d(&xs[0], &xs[1], &xs[2], stride, pad).unwrap();
            let (gi, gw, gb) = ops::conv2d_backward(&xs[0], &xs[1], &proj, stride, pad).unwrap();
            (dot(&y, &proj), vec![gi, gw, gb])
        };
        let err = grad_check(&f, &[input, weight, bias], 1e-5);
        assert!(err < PRIMITIVE_TOL, "seed {seed}: conv2d rel err {err}");
    }
}

#[test]
fn linear_gradients_over_random_shapes() {
    for seed in 0..20 {
        let mut rng = Rng::new(2000 + seed);
        let b = 1 + rng.next_below(4) as usize;
        let n = 1 + rng.next_below(6) as usize;
        let m = 1 + rng.next_below(6) as usize;
        let input = Tensor::randn(&[b, n], &mut rng);
        let weight = Tensor::randn(&[m, n], &mut rng);
        let bias = Tensor::randn(&[m], &mut rng);
        let proj = Tensor::randn(&[b, m], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::linear(&xs[0], &xs[1], &xs[2]).unwrap();
            let (gi, gw, gb) = ops::linear_backward(&xs[0], &xs[1], &proj).unwrap();
            (dot(&y, &proj), vec![gi, gw, gb])
        };
        let err = grad_check(&f, &[input, weight, bias], 1e-5);
        assert!(err < PRIMITIVE_TOL, "seed {seed}: linear rel err {err}");
    }
}

#[test]
fn silu_gradients_over_random_shapes() {
    for seed in 0..20 {
        let mut rng = Rng::new(3000 + seed);
        let n = 1 + rng.next_below(40) as usize;
        let x = Tensor::randn(&[n], &mut rng);
        let proj = Tensor::randn(&[n], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::silu(&xs[0]).unwrap();
            let g = ops::silu_backward(&xs[0], &proj).unwrap();
            (dot(&y, &proj), vec![g])
        };
        let err = grad_check(&f, &[x], 1e-5);
        assert!(err < PRIMITIVE_TOL, "seed {seed}: silu rel err {err}");
    }
}

#[test]
fn group_norm_gradients_over_random_shapes() {
    for seed in 0..20 {
        let mut rng = Rng::new(4000 + seed);
        let b = 1 + rng.next_below(2) as usize;
        let groups = 1 + rng.next_below(3) as usize;
        let c = groups * (1 + rng.next_below(3) as usize);
        let h = 2 + rng.next_below(3) as usize;
        let w = 2 + rng.next_below(3) as usize;
        let x = Tensor::randn(&[b, c, h, w], &mut rng);
        let gamma = Tensor::randn(&[c], &mut rng);
        let beta = Tensor::randn(&[c], &mut rng);
        let proj = Tensor::randn(&[b, c, h, w], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::group_norm(&xs[0], groups, &xs[1], &xs[2]).unwrap();
            let (gx, gg, gb) = ops::group_norm_backward(&xs[0], groups, &xs[1], &proj).unwrap();
            (dot(&y, &proj), vec![gx, gg, gb])
        };
        let err = grad_check(&f, &[x, gamma, beta], 1e-5);
        assert!(err < PRIMITIVE_TOL, "seed {seed}: group_norm rel err {err}");
    }
}

#[test]
fn interpolate_gradients_over_random_shapes() {
    for seed in 0..20 {
        let mut rng = Rng::new(5000 + seed);
        let mode = [InterpMode::Nearest, InterpMode::Bilinear][rng.next_below(2) as usize];
        let factor = 2 + rng.next_below(2) as usize;
        let h = 2 + rng.next_below(3) as usize;
        let w = 2 + rng.next_below(3) as usize;
        let x = Tensor::randn(&[1, 2, h, w], &mut rng);
        let proj = Tensor::randn(&[1, 2, h * factor, w * factor], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = ops::interpolate2d(&xs[0], factor, mode).unwrap();
            let g = ops::interpolate2d_backward(&proj, factor, mode, h, w).unwrap();
            (dot(&y, &proj), vec![g])
        };
        let err = grad_check(&f, &[x], 1e-5);
        assert!(err < PRIMITIVE_TOL, "seed {seed}: interpolate rel err {err}");
    }
}

#[test]
fn diffusion_loss_gradients_without_control() {
    let dcfg = DenoiserConfig { latent_channels: 2, base_width: 8, emb_dim: 16, text_dim: 8, cond_channels: 1 };
    let vcfg = VaeConfig { latent_channels: 2, base_width: 4 };
    let p = init_denoiser(&dcfg, &mut Rng::new(1)).unwrap();
    let v = init_vae(&vcfg, &mut Rng::new(2)).unwrap();
    let schedule = linear_schedule(50, 1e-4, 0.02).unwrap();
    let mut rng = Rng::new(3);
    let images = Tensor::randn(&[2, 1, 32, 32], &mut rng).map(|x| 1.0 / (1.0 + (-x).exp()));
    let prompts = [
        text::sequence_ids(&text::tokenize(&["field", "bright"])),
        text::sequence_ids(&text::tokenize(&["water"])),
    ];
    let err = diffusion_grad_check(&p, None, &v, 1.0, &images, &prompts, &schedule, 200, 1e-5, &mut rng).unwrap();
    assert!(err < 1e-4, "diffusion loss grad rel err {err}");
}

#[test]
fn diffusion_loss_gradients_with_control() {
    let dcfg = DenoiserConfig { latent_channels: 2, base_width: 8, emb_dim: 16, text_dim: 8, cond_channels: 1 };
    let vcfg = VaeConfig { latent_channels: 2, base_width: 4 };
    let p = init_denoiser(&dcfg, &mut Rng::new(4)).unwrap();
    let v = init_vae(&vcfg, &mut Rng::new(5)).unwrap();
    let mut branch = init_control(&p, &mut Rng::new(6));
    let mut rng = Rng::new(7);
    // randomize the zero projections so branch gradients flow
    for (name, t) in branch.named_mut() {
        if name.contains("zero") {
            let mut r = Tensor::randn(t.shape(), &mut rng);
            r.scale(0.1);
            *t = r;
        }
    }
    let schedule = linear_schedule(50, 1e-4, 0.02).unwrap();
    let images = Tensor::randn(&[1, 1, 32, 32], &mut rng).map(|x| 1.0 / (1.0 + (-x).exp()));
    let conds = Tensor::randn(&[1, 1, 32, 32], &mut rng).map(|x| 1.0 / (1.0 + (-x).exp()));
    let prompts = [text::sequence_ids(&text::tokenize(&["building", "dense"]))];
    let err = diffusion_grad_check(
        &p,
        Some((&branch, &conds)),
        &v,
        1.0,
        &images,
        &prompts,
        &schedule,
        200,
        1e-5,
        &mut rng,
    )
    .unwrap();
    assert!(err < 1e-4, "diffusion loss grad rel err with control {err}");
}

#[test]
fn vae_loss_gradients() {
    let vcfg = VaeConfig { latent_channels: 2, base_width: 4 };
    let v = init_vae(&vcfg, &mut Rng::new(8)).unwrap();
    let mut rng = Rng::new(9);
    let x = Tensor::randn(&[1, 1, 16, 16], &mut rng).map(|t| 1.0 / (1.0 + (-t).exp()));
    let err = vae_grad_check(&v, &x, 1e-4, 200, 1e-5, &mut rng).unwrap();
    assert!(err < 1e-4, "vae loss grad rel err {err}");
}
