//! Variational autoencoder with ×8-per-side spatial compression.
//!
//! Single-channel amplitude images in, `latent_channels` (default 4) out.
//! Three stride-2 stages down, three nearest-upsample stages back, sigmoid
//! squashing so decoded pixels live in [0, 1]. The ELBO is reconstruction
//! MSE plus `kl_weight`·KL(N(μ,σ)‖N(0,I)) with the KL in closed form.

use crate::error::{invalid, shape_mismatch, Result};
use crate::math;
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::string::String;
use alloc::vec::Vec;

pub const VAE_GN_GROUPS: usize = 4;
pub const DEFAULT_KL_WEIGHT: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub latent_channels: usize,
    pub base_width: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { latent_channels: 4, base_width: 8 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < VAE_GN_GROUPS || self.base_width % VAE_GN_GROUPS != 0 {
            return Err(invalid(
                "vae_config",
                alloc::format!("base width {} must be a positive multiple of {VAE_GN_GROUPS}", self.base_width),
            ));
        }
        if self.latent_channels == 0 {
            return Err(invalid("vae_config", "latent channels must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    w: Tensor,
    b: Option<Tensor>,
    stride: usize,
}

impl Conv {
    fn init(cin: usize, cout: usize, stride: usize, bias: bool, rng: &mut Rng) -> Conv {
        let std = math::sqrt(2.0 / (cin * 9) as f64);
        let mut w = Tensor::randn(&[cout, cin, 3, 3], rng);
        w.scale(std);
        Conv { w, b: bias.then(|| Tensor::zeros(&[cout])), stride }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.b {
            Some(b) => ops::conv2d(x, &self.w, b, self.stride, 1),
            None => {
                let zero = Tensor::zeros(&[self.w.shape()[0]]);
                ops::conv2d(x, &self.w, &zero, self.stride, 1)
            }
        }
    }

    fn backward(&self, x: &Tensor, g: &Tensor) -> Result<(Tensor, Conv)> {
        let (dx, dw, db) = ops::conv2d_backward(x, &self.w, g, self.stride, 1)?;
        Ok((dx, Conv { w: dw, b: self.b.as_ref().map(|_| db), stride: self.stride }))
    }

    fn grads_like(&self) -> Conv {
        Conv { w: self.w.zeros_like(), b: self.b.as_ref().map(|b| b.zeros_like()), stride: self.stride }
    }
}

/// conv3x3 → group_norm → silu
#[derive(Debug, Clone, PartialEq)]
struct VBlock {
    conv: Conv,
    gamma: Tensor,
    beta: Tensor,
}

struct VCache {
    x: Tensor,
    h: Tensor,
    g: Tensor,
}

impl VBlock {
    fn init(cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> VBlock {
        VBlock {
            conv: Conv::init(cin, cout, stride, false, rng),
            gamma: Tensor::full(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, VCache)> {
        let h = self.conv.forward(x)?;
        let g = ops::group_norm(&h, VAE_GN_GROUPS, &self.gamma, &self.beta)?;
        let a = ops::silu(&g)?;
        Ok((a, VCache { x: x.clone(), h, g }))
    }

    fn backward(&self, cache: &VCache, grad_out: &Tensor) -> Result<(Tensor, VBlock)> {
        let dg = ops::silu_backward(&cache.g, grad_out)?;
        let (dh, dgamma, dbeta) = ops::group_norm_backward(&cache.h, VAE_GN_GROUPS, &self.gamma, &dg)?;
        let (dx, dconv) = self.conv.backward(&cache.x, &dh)?;
        Ok((dx, VBlock { conv: dconv, gamma: dgamma, beta: dbeta }))
    }

    fn grads_like(&self) -> VBlock {
        VBlock { conv: self.conv.grads_like(), gamma: self.gamma.zeros_like(), beta: self.beta.zeros_like() }
    }
}

/// Encoder (three stride-2 stages → μ, logvar heads) and mirrored decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub config: VaeConfig,
    vin: VBlock,
    e1: VBlock,
    e2: VBlock,
    e3: VBlock,
    head_mu: Conv,
    head_lv: Conv,
    din: VBlock,
    u1: VBlock,
    u2: VBlock,
    u3: VBlock,
    out: Conv,
}

pub fn init_vae(config: &VaeConfig, rng: &mut Rng) -> Result<VaeParams> {
    config.validate()?;
    let w = config.base_width;
    let c = config.latent_channels;
    Ok(VaeParams {
        config: config.clone(),
        vin: VBlock::init(1, w, 1, rng),
        e1: VBlock::init(w, 2 * w, 2, rng),
        e2: VBlock::init(2 * w, 4 * w, 2, rng),
        e3: VBlock::init(4 * w, 4 * w, 2, rng),
        head_mu: Conv::init(4 * w, c, 1, true, rng),
        head_lv: {
            // start near a unit posterior: zero weights, zero logvar
            let mut conv = Conv::init(4 * w, c, 1, true, rng);
            conv.w.scale(0.01);
            conv
        },
        din: VBlock::init(c, 4 * w, 1, rng),
        u1: VBlock::init(4 * w, 4 * w, 1, rng),
        u2: VBlock::init(4 * w, 2 * w, 1, rng),
        u3: VBlock::init(2 * w, w, 1, rng),
        out: Conv::init(w, 1, 1, true, rng),
    })
}

macro_rules! vnamed {
    ($out:ident, $prefix:expr, $block:expr) => {
        $out.push((alloc::format!("{}.conv.w", $prefix), &$block.conv.w));
        if let Some(b) = &$block.conv.b {
            $out.push((alloc::format!("{}.conv.b", $prefix), b));
        }
        $out.push((alloc::format!("{}.gn.gamma", $prefix), &$block.gamma));
        $out.push((alloc::format!("{}.gn.beta", $prefix), &$block.beta));
    };
}

macro_rules! vnamed_mut {
    ($out:ident, $prefix:expr, $block:expr) => {
        $out.push((alloc::format!("{}.conv.w", $prefix), &mut $block.conv.w));
        if let Some(b) = &mut $block.conv.b {
            $out.push((alloc::format!("{}.conv.b", $prefix), b));
        }
        $out.push((alloc::format!("{}.gn.gamma", $prefix), &mut $block.gamma));
        $out.push((alloc::format!("{}.gn.beta", $prefix), &mut $block.beta));
    };
}

impl VaeParams {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        vnamed!(out, "vin", self.vin);
        vnamed!(out, "e1", self.e1);
        vnamed!(out, "e2", self.e2);
        vnamed!(out, "e3", self.e3);
        out.push((String::from("head_mu.w"), &self.head_mu.w));
        if let Some(b) = &self.head_mu.b {
            out.push((String::from("head_mu.b"), b));
        }
        out.push((String::from("head_lv.w"), &self.head_lv.w));
        if let Some(b) = &self.head_lv.b {
            out.push((String::from("head_lv.b"), b));
        }
        vnamed!(out, "din", self.din);
        vnamed!(out, "u1", self.u1);
        vnamed!(out, "u2", self.u2);
        vnamed!(out, "u3", self.u3);
        out.push((String::from("out.w"), &self.out.w));
        if let Some(b) = &self.out.b {
            out.push((String::from("out.b"), b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        vnamed_mut!(out, "vin", self.vin);
        vnamed_mut!(out, "e1", self.e1);
        vnamed_mut!(out, "e2", self.e2);
        vnamed_mut!(out, "e3", self.e3);
        out.push((String::from("head_mu.w"), &mut self.head_mu.w));
        if let Some(b) = &mut self.head_mu.b {
            out.push((String::from("head_mu.b"), b));
        }
        out.push((String::from("head_lv.w"), &mut self.head_lv.w));
        if let Some(b) = &mut self.head_lv.b {
            out.push((String::from("head_lv.b"), b));
        }
        vnamed_mut!(out, "din", self.din);
        vnamed_mut!(out, "u1", self.u1);
        vnamed_mut!(out, "u2", self.u2);
        vnamed_mut!(out, "u3", self.u3);
        out.push((String::from("out.w"), &mut self.out.w));
        if let Some(b) = &mut self.out.b {
            out.push((String::from("out.b"), b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn grads_like(&self) -> VaeParams {
        VaeParams {
            config: self.config.clone(),
            vin: self.vin.grads_like(),
            e1: self.e1.grads_like(),
            e2: self.e2.grads_like(),
            e3: self.e3.grads_like(),
            head_mu: self.head_mu.grads_like(),
            head_lv: self.head_lv.grads_like(),
            din: self.din.grads_like(),
            u1: self.u1.grads_like(),
            u2: self.u2.grads_like(),
            u3: self.u3.grads_like(),
            out: self.out.grads_like(),
        }
    }
}

fn check_divisible(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(shape_mismatch("vae encode", x.shape(), &[b, 1, h, w]));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(invalid(
            "vae encode",
            alloc::format!("spatial extents {h}x{w} must be divisible by 8"),
        ));
    }
    Ok((b, c, h, w))
}

struct EncCache {
    vin: VCache,
    e1: VCache,
    e2: VCache,
    e3: VCache,
    a3: Tensor,
}

fn encode_inner(v: &VaeParams, x: &Tensor) -> Result<(Tensor, Tensor, EncCache)> {
    check_divisible(x)?;
    let (a0, vin) = v.vin.forward(x)?;
    let (a1, e1) = v.e1.forward(&a0)?;
    let (a2, e2) = v.e2.forward(&a1)?;
    let (a3, e3) = v.e3.forward(&a2)?;
    let mu = v.head_mu.forward(&a3)?;
    let logvar = v.head_lv.forward(&a3)?;
    Ok((mu, logvar, EncCache { vin, e1, e2, e3, a3 }))
}

struct DecCache {
    din: VCache,
    u1: VCache,
    u2: VCache,
    u3: VCache,
    a3: Tensor,
    y: Tensor,
}

fn decode_inner(v: &VaeParams, z: &Tensor) -> Result<(Tensor, DecCache)> {
    let (a0, din) = v.din.forward(z)?;
    let z_up1 = ops::interpolate2d(&a0, 2, ops::InterpMode::Nearest)?;
    let (a1, u1) = v.u1.forward(&z_up1)?;
    let a1_up = ops::interpolate2d(&a1, 2, ops::InterpMode::Nearest)?;
    let (a2, u2) = v.u2.forward(&a1_up)?;
    let a2_up = ops::interpolate2d(&a2, 2, ops::InterpMode::Nearest)?;
    let (a3, u3) = v.u3.forward(&a2_up)?;
    let pre = v.out.forward(&a3)?;
    let y = ops::sigmoid(&pre)?;
    Ok((y.clone(), DecCache { din, u1, u2, u3, a3, y }))
}

/// μ and logvar of the posterior for `x` [B,1,H,W] (deterministic).
pub fn encode_params(v: &VaeParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (mu, logvar, _) = encode_inner(v, x)?;
    Ok((mu, logvar))
}

/// z = μ (+ σ·ξ when `stochastic`), shape [B,c,H/8,W/8].
pub fn encode(v: &VaeParams, x: &Tensor, rng: &mut Rng, stochastic: bool) -> Result<Tensor> {
    let (mu, logvar, _) = encode_inner(v, x)?;
    if !stochastic {
        return Ok(mu);
    }
    let mut z = mu;
    for (zi, lv) in z.data_mut().iter_mut().zip(logvar.data()) {
        *zi += math::exp(lv / 2.0) * rng.next_normal();
    }
    Ok(z)
}

/// x̃ = D(z) in [0, 1]; deterministic.
pub fn decode(v: &VaeParams, z: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = z.dims4()?;
    if c != v.config.latent_channels {
        return Err(shape_mismatch("vae decode", z.shape(), &[b, v.config.latent_channels, h, w]));
    }
    Ok(decode_inner(v, z)?.0)
}

/// Closed-form KL(N(μ,σ)‖N(0,I)) summed per dimension then averaged:
/// mean over elements of ½(μ² + e^logvar − 1 − logvar).
pub fn kl_closed_form(mu: &Tensor, logvar: &Tensor) -> f64 {
    let n = mu.numel() as f64;
    mu.data()
        .iter()
        .zip(logvar.data())
        .map(|(m, lv)| 0.5 * (m * m + math::exp(*lv) - 1.0 - lv))
        .sum::<f64>()
        / n
}

pub struct VaeLossReport {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Stochastic ELBO: reconstruction MSE + kl_weight·KL, with gradients for
/// every parameter. The reparameterized draw comes from `rng` (pass the same
/// generator value to reproduce the draw exactly).
pub fn vae_loss(
    v: &VaeParams,
    x: &Tensor,
    rng: &mut Rng,
    kl_weight: f64,
) -> Result<(VaeLossReport, VaeParams)> {
    if kl_weight < 0.0 {
        return Err(invalid("vae_loss", "kl_weight must be >= 0"));
    }
    let (mu, logvar, enc_cache) = encode_inner(v, x)?;
    let xi = Tensor::randn(mu.shape(), rng);
    let mut z = mu.clone();
    for ((zi, lv), e) in z.data_mut().iter_mut().zip(logvar.data()).zip(xi.data()) {
        *zi += math::exp(lv / 2.0) * e;
    }
    let (y, dec_cache) = decode_inner(v, &z)?;

    let n_pix = x.numel() as f64;
    let recon = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n_pix;
    let kl = kl_closed_form(&mu, &logvar);
    let total = recon + kl_weight * kl;

    // ------- backward -------
    let mut grads = v.grads_like();

    // reconstruction path
    let mut dy = y.clone();
    for (d, (yi, xt)) in dy.data_mut().iter_mut().zip(y.data().iter().zip(x.data())) {
        *d = 2.0 * (yi - xt) / n_pix;
    }
    let dpre = ops::sigmoid_backward_from_output(&dec_cache.y, &dy)?;
    let (da3, dout) = v.out.backward(&dec_cache.a3, &dpre)?;
    grads.out = dout;
    let (da2_up, du3) = v.u3.backward(&dec_cache.u3, &da3)?;
    grads.u3 = du3;
    let (_, _, h2, w2) = dec_cache.u2.g.dims4()?;
    let da2 = ops::interpolate2d_backward(&da2_up, 2, ops::InterpMode::Nearest, h2, w2)?;
    let (da1_up, du2) = v.u2.backward(&dec_cache.u2, &da2)?;
    grads.u2 = du2;
    let (_, _, h1, w1) = dec_cache.u1.g.dims4()?;
    let da1 = ops::interpolate2d_backward(&da1_up, 2, ops::InterpMode::Nearest, h1, w1)?;
    let (dz_up1, du1) = v.u1.backward(&dec_cache.u1, &da1)?;
    grads.u1 = du1;
    let (_, _, h0, w0) = dec_cache.din.g.dims4()?;
    let da0 = ops::interpolate2d_backward(&dz_up1, 2, ops::InterpMode::Nearest, h0, w0)?;
    let (dz, ddin) = v.din.backward(&dec_cache.din, &da0)?;
    grads.din = ddin;

    // z = μ + e^{lv/2}·ξ, plus the closed-form KL terms
    let n_lat = mu.numel() as f64;
    let mut dmu = dz.clone();
    let mut dlv = dz.clone();
    for ((dm, dl), ((m, lv), e)) in dmu
        .data_mut()
        .iter_mut()
        .zip(dlv.data_mut().iter_mut())
        .zip(mu.data().iter().zip(logvar.data()).zip(xi.data()))
    {
        let dz_v = *dm;
        *dm = dz_v + kl_weight * m / n_lat;
        *dl = dz_v * 0.5 * math::exp(lv / 2.0) * e + kl_weight * 0.5 * (math::exp(*lv) - 1.0) / n_lat;
    }

    // encoder path
    let (da3_mu, dhead_mu) = v.head_mu.backward(&enc_cache.a3, &dmu)?;
    grads.head_mu = dhead_mu;
    let (da3_lv, dhead_lv) = v.head_lv.backward(&enc_cache.a3, &dlv)?;
    grads.head_lv = dhead_lv;
    let mut da3 = da3_mu;
    da3.add_scaled(&da3_lv, 1.0)?;
    let (da2, de3) = v.e3.backward(&enc_cache.e3, &da3)?;
    grads.e3 = de3;
    let (da1, de2) = v.e2.backward(&enc_cache.e2, &da2)?;
    grads.e2 = de2;
    let (da0, de1) = v.e1.backward(&enc_cache.e1, &da1)?;
    grads.e1 = de1;
    let (_, dvin) = v.vin.backward(&enc_cache.vin, &da0)?;
    grads.vin = dvin;

    Ok((VaeLossReport { total, recon, kl }, grads))
}

/// Central-difference probe of `vae_loss` gradients on up to `max_probes`
/// randomly chosen parameters; the reparameterization draw is held fixed.
pub fn vae_grad_check(
    v: &VaeParams,
    x: &Tensor,
    kl_weight: f64,
    max_probes: usize,
    eps: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = *rng; // frozen generator state for every evaluation
    let (_, grads) = vae_loss(v, x, &mut draw.clone(), kl_weight)?;
    let named = grads.named();
    let sizes: Vec<usize> = named.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    for _ in 0..max_probes.min(total) {
        let flat = rng.next_below(total as u64) as usize;
        let mut rest = flat;
        let mut ti = 0;
        for (i, sz) in sizes.iter().enumerate() {
            if rest < *sz {
                ti = i;
                break;
            }
            rest -= sz;
        }
        let ei = rest;
        let analytic = named[ti].1.data()[ei];
        let eval = |delta: f64| -> Result<f64> {
            let mut vv = v.clone();
            {
                let mut nm = vv.named_mut();
                nm[ti].1.data_mut()[ei] += delta;
            }
            let (report, _) = vae_loss(&vv, x, &mut draw.clone(), kl_weight)?;
            Ok(report.total)
        };
        let fp = eval(eps)?;
        let fm = eval(-eps)?;
        let central = (fp - fm) / (2.0 * eps);
        let rel = math::abs(analytic - central) / (math::abs(analytic) + math::abs(central) + 1e-12);
        worst = math::maxf(worst, rel);
    }
    Ok(worst)
}
