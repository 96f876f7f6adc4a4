//! Conditional noise-prediction network ε_θ(z_t, t, text, control).
//!
//! A small convolutional U-shaped net over latents: two downsample levels,
//! a bottleneck, and skip-connected decoder blocks. Timestep conditioning
//! uses sinusoidal features through a 2-layer MLP; text conditioning is the
//! mean-pooled token embedding projected and added to the time embedding
//! (a deliberate simplification of cross-attention). Spatial conditioning
//! follows the ControlNet recipe: a trainable copy of the encoder fed by a
//! condition stem, injecting residuals into the decoder's skip connections
//! through zero-initialized 1×1 projections, so a fresh branch is a no-op.
//!
//! Gradients and optimizer moments reuse the parameter structures: a
//! "grads" value is just a parameter tree holding gradient tensors.

use crate::error::{invalid, shape_mismatch, Result};
use crate::math;
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::{pool_tokens, TextEmbedder, MAX_TOKENS};
use alloc::string::String;
use alloc::vec::Vec;

pub const GN_GROUPS: usize = 4;
pub const TIME_FEATURES: usize = 32;

pub type TokenSeq = [usize; MAX_TOKENS];

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub emb_dim: usize,
    pub text_dim: usize,
    pub cond_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            base_width: 16,
            emb_dim: 64,
            text_dim: 16,
            cond_channels: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < GN_GROUPS || self.base_width % GN_GROUPS != 0 {
            return Err(invalid(
                "denoiser_config",
                alloc::format!("base width {} must be a positive multiple of {GN_GROUPS}", self.base_width),
            ));
        }
        if self.latent_channels == 0 || self.emb_dim == 0 || self.text_dim == 0 || self.cond_channels == 0 {
            return Err(invalid("denoiser_config", "all dimensions must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

/// Convolution parameters. Convs feeding straight into a group norm carry
/// no bias (the norm would cancel it); all others do.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    fn init(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, rng: &mut Rng) -> Conv {
        let std = math::sqrt(2.0 / (cin * k * k) as f64);
        let mut w = Tensor::randn(&[cout, cin, k, k], rng);
        w.scale(std);
        Conv { w, b: bias.then(|| Tensor::zeros(&[cout])), stride, pad }
    }

    fn zeroed(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Conv {
        Conv { w: Tensor::zeros(&[cout, cin, k, k]), b: Some(Tensor::zeros(&[cout])), stride, pad }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.b {
            Some(b) => ops::conv2d(x, &self.w, b, self.stride, self.pad),
            None => {
                let zero = Tensor::zeros(&[self.w.shape()[0]]);
                ops::conv2d(x, &self.w, &zero, self.stride, self.pad)
            }
        }
    }

    fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Conv)> {
        let (dx, dw, db) = ops::conv2d_backward(x, &self.w, grad_out, self.stride, self.pad)?;
        Ok((dx, Conv { w: dw, b: self.b.as_ref().map(|_| db), stride: self.stride, pad: self.pad }))
    }

    fn grads_like(&self) -> Conv {
        Conv {
            w: self.w.zeros_like(),
            b: self.b.as_ref().map(|b| b.zeros_like()),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lin {
    pub w: Tensor,
    pub b: Tensor,
}

impl Lin {
    fn init(n: usize, m: usize, rng: &mut Rng) -> Lin {
        let std = math::sqrt(1.0 / n as f64);
        let mut w = Tensor::randn(&[m, n], rng);
        w.scale(std);
        Lin { w, b: Tensor::zeros(&[m]) }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.w, &self.b)
    }

    fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Lin)> {
        let (dx, dw, db) = ops::linear_backward(x, &self.w, grad_out)?;
        Ok((dx, Lin { w: dw, b: db }))
    }

    fn grads_like(&self) -> Lin {
        Lin { w: self.w.zeros_like(), b: self.b.zeros_like() }
    }
}

/// conv3x3 (biasless) → group_norm → +emb → silu, with an optional
/// identity skip.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: Conv,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub emb: Lin,
    pub residual: bool,
}

pub struct BlockCache {
    x: Tensor,
    h: Tensor,
    g_inj: Tensor,
}

impl Block {
    fn init(cin: usize, cout: usize, emb_dim: usize, residual: bool, rng: &mut Rng) -> Block {
        Block {
            conv: Conv::init(cin, cout, 3, 1, 1, false, rng),
            gamma: Tensor::full(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
            emb: Lin::init(emb_dim, cout, rng),
            residual,
        }
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<(Tensor, BlockCache)> {
        let h = self.conv.forward(x)?;
        let mut g_inj = ops::group_norm(&h, GN_GROUPS, &self.gamma, &self.beta)?;
        let embout = self.emb.forward(emb)?;
        add_channel_bias(&mut g_inj, &embout)?;
        let a = ops::silu(&g_inj)?;
        let y = if self.residual {
            let mut y = a;
            y.add_scaled(x, 1.0)?;
            y
        } else {
            a
        };
        Ok((y, BlockCache { x: x.clone(), h, g_inj }))
    }

    fn backward(
        &self,
        cache: &BlockCache,
        emb: &Tensor,
        grad_out: &Tensor,
        demb_acc: &mut Tensor,
    ) -> Result<(Tensor, Block)> {
        let dg_inj = ops::silu_backward(&cache.g_inj, grad_out)?;
        let dembout = sum_spatial(&dg_inj)?;
        let (demb, demb_lin) = self.emb.backward(emb, &dembout)?;
        demb_acc.add_scaled(&demb, 1.0)?;
        let (dh, dgamma, dbeta) = ops::group_norm_backward(&cache.h, GN_GROUPS, &self.gamma, &dg_inj)?;
        let (mut dx, dconv) = self.conv.backward(&cache.x, &dh)?;
        if self.residual {
            dx.add_scaled(grad_out, 1.0)?;
        }
        Ok((
            dx,
            Block {
                conv: dconv,
                gamma: dgamma,
                beta: dbeta,
                emb: demb_lin,
                residual: self.residual,
            },
        ))
    }

    fn grads_like(&self) -> Block {
        Block {
            conv: self.conv.grads_like(),
            gamma: self.gamma.zeros_like(),
            beta: self.beta.zeros_like(),
            emb: self.emb.grads_like(),
            residual: self.residual,
        }
    }
}

/// h[b,c,·,·] += bias[b,c]
fn add_channel_bias(h: &mut Tensor, bias: &Tensor) -> Result<()> {
    let (b, c, hh, ww) = h.dims4()?;
    if bias.shape() != [b, c] {
        return Err(shape_mismatch("add_channel_bias", bias.shape(), &[b, c]));
    }
    let hw = hh * ww;
    for bi in 0..b {
        for ci in 0..c {
            let v = bias.data()[bi * c + ci];
            for e in &mut h.data_mut()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                *e += v;
            }
        }
    }
    Ok(())
}

/// [B,C] sums over the spatial axes of a [B,C,H,W] gradient.
fn sum_spatial(g: &Tensor) -> Result<Tensor> {
    let (b, c, hh, ww) = g.dims4()?;
    let hw = hh * ww;
    let mut out = Tensor::zeros(&[b, c]);
    for bc in 0..b * c {
        out.data_mut()[bc] = g.data()[bc * hw..(bc + 1) * hw].iter().sum();
    }
    Ok(out)
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, h, w) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if ba != bb || h != hb || w != wb {
        return Err(shape_mismatch("concat_channels", a.shape(), b.shape()));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[ba, ca + cb, h, w]);
    for bi in 0..ba {
        let dst = &mut out.data_mut()[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
        dst[..ca * hw].copy_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
        dst[ca * hw..].copy_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    Ok(out)
}

fn split_channels(g: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = g.dims4()?;
    let cb = c - ca;
    let hw = h * w;
    let mut ga = Tensor::zeros(&[b, ca, h, w]);
    let mut gb = Tensor::zeros(&[b, cb, h, w]);
    for bi in 0..b {
        let src = &g.data()[bi * c * hw..(bi + 1) * c * hw];
        ga.data_mut()[bi * ca * hw..(bi + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
        gb.data_mut()[bi * cb * hw..(bi + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
    }
    Ok((ga, gb))
}

/// Sinusoidal timestep features, [B, TIME_FEATURES].
fn time_features(ts: &[usize]) -> Tensor {
    let half = TIME_FEATURES / 2;
    let mut out = Tensor::zeros(&[ts.len(), TIME_FEATURES]);
    for (bi, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let omega = math::exp(-math::ln(10000.0) * i as f64 / (half - 1) as f64);
            let arg = t as f64 * omega;
            out.data_mut()[bi * TIME_FEATURES + 2 * i] = math::sin(arg);
            out.data_mut()[bi * TIME_FEATURES + 2 * i + 1] = math::cos(arg);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Weights of ε_θ: trunk, time/text embedders.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub embedder: TextEmbedder,
    pub text_proj: Lin,
    pub time1: Lin,
    pub time2: Lin,
    pub stem: Conv,
    pub enc0: Block,
    pub down0: Conv,
    pub enc1: Block,
    pub down1: Conv,
    pub mid: Block,
    pub up1: Conv,
    pub dec1: Block,
    pub up0: Conv,
    pub dec0: Block,
    pub head_gamma: Tensor,
    pub head_beta: Tensor,
    pub head: Conv,
}

/// He-style random init; deterministic for a given seed.
pub fn init_denoiser(config: &DenoiserConfig, rng: &mut Rng) -> Result<DenoiserParams> {
    config.validate()?;
    let w = config.base_width;
    let e = config.emb_dim;
    let lc = config.latent_channels;
    Ok(DenoiserParams {
        config: config.clone(),
        embedder: TextEmbedder::init(config.text_dim, rng),
        text_proj: Lin::init(config.text_dim, e, rng),
        time1: Lin::init(TIME_FEATURES, e, rng),
        time2: Lin::init(e, e, rng),
        stem: Conv::init(lc, w, 3, 1, 1, true, rng),
        enc0: Block::init(w, w, e, true, rng),
        down0: Conv::init(w, 2 * w, 3, 2, 1, true, rng),
        enc1: Block::init(2 * w, 2 * w, e, true, rng),
        down1: Conv::init(2 * w, 4 * w, 3, 2, 1, true, rng),
        mid: Block::init(4 * w, 4 * w, e, true, rng),
        up1: Conv::init(4 * w, 2 * w, 3, 1, 1, true, rng),
        dec1: Block::init(4 * w, 2 * w, e, false, rng),
        up0: Conv::init(2 * w, w, 3, 1, 1, true, rng),
        dec0: Block::init(2 * w, w, e, false, rng),
        head_gamma: Tensor::full(&[w], 1.0),
        head_beta: Tensor::zeros(&[w]),
        head: Conv::init(w, lc, 3, 1, 1, true, rng),
    })
}

macro_rules! named_block {
    ($out:ident, $prefix:expr, $block:expr) => {
        $out.push((alloc::format!("{}.conv.w", $prefix), &$block.conv.w));
        if let Some(b) = &$block.conv.b {
            $out.push((alloc::format!("{}.conv.b", $prefix), b));
        }
        $out.push((alloc::format!("{}.gn.gamma", $prefix), &$block.gamma));
        $out.push((alloc::format!("{}.gn.beta", $prefix), &$block.beta));
        $out.push((alloc::format!("{}.emb.w", $prefix), &$block.emb.w));
        $out.push((alloc::format!("{}.emb.b", $prefix), &$block.emb.b));
    };
}

macro_rules! named_block_mut {
    ($out:ident, $prefix:expr, $block:expr) => {
        $out.push((alloc::format!("{}.conv.w", $prefix), &mut $block.conv.w));
        if let Some(b) = &mut $block.conv.b {
            $out.push((alloc::format!("{}.conv.b", $prefix), b));
        }
        $out.push((alloc::format!("{}.gn.gamma", $prefix), &mut $block.gamma));
        $out.push((alloc::format!("{}.gn.beta", $prefix), &mut $block.beta));
        $out.push((alloc::format!("{}.emb.w", $prefix), &mut $block.emb.w));
        $out.push((alloc::format!("{}.emb.b", $prefix), &mut $block.emb.b));
    };
}

impl DenoiserParams {
    /// All tensors with stable names, in a stable order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push((String::from("embedder.table"), &self.embedder.table));
        out.push((String::from("text_proj.w"), &self.text_proj.w));
        out.push((String::from("text_proj.b"), &self.text_proj.b));
        out.push((String::from("time1.w"), &self.time1.w));
        out.push((String::from("time1.b"), &self.time1.b));
        out.push((String::from("time2.w"), &self.time2.w));
        out.push((String::from("time2.b"), &self.time2.b));
        out.push((String::from("stem.w"), &self.stem.w));
        if let Some(b) = &self.stem.b {
            out.push((String::from("stem.b"), b));
        }
        named_block!(out, "enc0", self.enc0);
        out.push((String::from("down0.w"), &self.down0.w));
        if let Some(b) = &self.down0.b {
            out.push((String::from("down0.b"), b));
        }
        named_block!(out, "enc1", self.enc1);
        out.push((String::from("down1.w"), &self.down1.w));
        if let Some(b) = &self.down1.b {
            out.push((String::from("down1.b"), b));
        }
        named_block!(out, "mid", self.mid);
        out.push((String::from("up1.w"), &self.up1.w));
        if let Some(b) = &self.up1.b {
            out.push((String::from("up1.b"), b));
        }
        named_block!(out, "dec1", self.dec1);
        out.push((String::from("up0.w"), &self.up0.w));
        if let Some(b) = &self.up0.b {
            out.push((String::from("up0.b"), b));
        }
        named_block!(out, "dec0", self.dec0);
        out.push((String::from("head.gn.gamma"), &self.head_gamma));
        out.push((String::from("head.gn.beta"), &self.head_beta));
        out.push((String::from("head.w"), &self.head.w));
        if let Some(b) = &self.head.b {
            out.push((String::from("head.b"), b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push((String::from("embedder.table"), &mut self.embedder.table));
        out.push((String::from("text_proj.w"), &mut self.text_proj.w));
        out.push((String::from("text_proj.b"), &mut self.text_proj.b));
        out.push((String::from("time1.w"), &mut self.time1.w));
        out.push((String::from("time1.b"), &mut self.time1.b));
        out.push((String::from("time2.w"), &mut self.time2.w));
        out.push((String::from("time2.b"), &mut self.time2.b));
        out.push((String::from("stem.w"), &mut self.stem.w));
        if let Some(b) = &mut self.stem.b {
            out.push((String::from("stem.b"), b));
        }
        named_block_mut!(out, "enc0", self.enc0);
        out.push((String::from("down0.w"), &mut self.down0.w));
        if let Some(b) = &mut self.down0.b {
            out.push((String::from("down0.b"), b));
        }
        named_block_mut!(out, "enc1", self.enc1);
        out.push((String::from("down1.w"), &mut self.down1.w));
        if let Some(b) = &mut self.down1.b {
            out.push((String::from("down1.b"), b));
        }
        named_block_mut!(out, "mid", self.mid);
        out.push((String::from("up1.w"), &mut self.up1.w));
        if let Some(b) = &mut self.up1.b {
            out.push((String::from("up1.b"), b));
        }
        named_block_mut!(out, "dec1", self.dec1);
        out.push((String::from("up0.w"), &mut self.up0.w));
        if let Some(b) = &mut self.up0.b {
            out.push((String::from("up0.b"), b));
        }
        named_block_mut!(out, "dec0", self.dec0);
        out.push((String::from("head.gn.gamma"), &mut self.head_gamma));
        out.push((String::from("head.gn.beta"), &mut self.head_beta));
        out.push((String::from("head.w"), &mut self.head.w));
        if let Some(b) = &mut self.head.b {
            out.push((String::from("head.b"), b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zero-filled gradient container with the same structure.
    pub fn grads_like(&self) -> DenoiserParams {
        DenoiserParams {
            config: self.config.clone(),
            embedder: TextEmbedder { table: self.embedder.table.zeros_like() },
            text_proj: self.text_proj.grads_like(),
            time1: self.time1.grads_like(),
            time2: self.time2.grads_like(),
            stem: self.stem.grads_like(),
            enc0: self.enc0.grads_like(),
            down0: self.down0.grads_like(),
            enc1: self.enc1.grads_like(),
            down1: self.down1.grads_like(),
            mid: self.mid.grads_like(),
            up1: self.up1.grads_like(),
            dec1: self.dec1.grads_like(),
            up0: self.up0.grads_like(),
            dec0: self.dec0.grads_like(),
            head_gamma: self.head_gamma.zeros_like(),
            head_beta: self.head_beta.zeros_like(),
            head: self.head.grads_like(),
        }
    }
}

// ---------------------------------------------------------------------------
// control branch
// ---------------------------------------------------------------------------

/// ControlNet-style branch: condition stem, trainable encoder copy, and
/// zero-initialized 1×1 projections feeding the trunk's skip connections.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBranch {
    pub cs1: Conv,
    pub cs2: Conv,
    pub cs3: Conv,
    pub stem: Conv,
    pub enc0: Block,
    pub down0: Conv,
    pub enc1: Block,
    pub down1: Conv,
    pub mid: Block,
    pub zero0: Conv,
    pub zero1: Conv,
    pub zero_mid: Conv,
}

/// Initialize a control branch for a (typically trained) trunk: the encoder
/// blocks are copied from the trunk, the condition stem is random, and every
/// projection conv starts at exactly zero.
pub fn init_control(p: &DenoiserParams, rng: &mut Rng) -> ControlBranch {
    let w = p.config.base_width;
    let cc = p.config.cond_channels;
    ControlBranch {
        cs1: Conv::init(cc, 8, 3, 2, 1, true, rng),
        cs2: Conv::init(8, 16, 3, 2, 1, true, rng),
        cs3: Conv::init(16, w, 3, 2, 1, true, rng),
        stem: p.stem.clone(),
        enc0: p.enc0.clone(),
        down0: p.down0.clone(),
        enc1: p.enc1.clone(),
        down1: p.down1.clone(),
        mid: p.mid.clone(),
        zero0: Conv::zeroed(w, w, 1, 1, 0),
        zero1: Conv::zeroed(2 * w, 2 * w, 1, 1, 0),
        zero_mid: Conv::zeroed(4 * w, 4 * w, 1, 1, 0),
    }
}

impl ControlBranch {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (name, conv) in [
            ("cs1", &self.cs1),
            ("cs2", &self.cs2),
            ("cs3", &self.cs3),
            ("stem", &self.stem),
        ] {
            out.push((alloc::format!("control.{name}.w"), &conv.w));
            if let Some(b) = &conv.b {
                out.push((alloc::format!("control.{name}.b"), b));
            }
        }
        named_block!(out, "control.enc0", self.enc0);
        out.push((String::from("control.down0.w"), &self.down0.w));
        if let Some(b) = &self.down0.b {
            out.push((String::from("control.down0.b"), b));
        }
        named_block!(out, "control.enc1", self.enc1);
        out.push((String::from("control.down1.w"), &self.down1.w));
        if let Some(b) = &self.down1.b {
            out.push((String::from("control.down1.b"), b));
        }
        named_block!(out, "control.mid", self.mid);
        for (name, conv) in [
            ("zero0", &self.zero0),
            ("zero1", &self.zero1),
            ("zero_mid", &self.zero_mid),
        ] {
            out.push((alloc::format!("control.{name}.w"), &conv.w));
            if let Some(b) = &conv.b {
                out.push((alloc::format!("control.{name}.b"), b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (name, conv) in [
            ("cs1", &mut self.cs1),
            ("cs2", &mut self.cs2),
            ("cs3", &mut self.cs3),
            ("stem", &mut self.stem),
        ] {
            out.push((alloc::format!("control.{name}.w"), &mut conv.w));
            if let Some(b) = &mut conv.b {
                out.push((alloc::format!("control.{name}.b"), b));
            }
        }
        named_block_mut!(out, "control.enc0", self.enc0);
        out.push((String::from("control.down0.w"), &mut self.down0.w));
        if let Some(b) = &mut self.down0.b {
            out.push((String::from("control.down0.b"), b));
        }
        named_block_mut!(out, "control.enc1", self.enc1);
        out.push((String::from("control.down1.w"), &mut self.down1.w));
        if let Some(b) = &mut self.down1.b {
            out.push((String::from("control.down1.b"), b));
        }
        named_block_mut!(out, "control.mid", self.mid);
        for (name, conv) in [
            ("zero0", &mut self.zero0),
            ("zero1", &mut self.zero1),
            ("zero_mid", &mut self.zero_mid),
        ] {
            out.push((alloc::format!("control.{name}.w"), &mut conv.w));
            if let Some(b) = &mut conv.b {
                out.push((alloc::format!("control.{name}.b"), b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn grads_like(&self) -> ControlBranch {
        ControlBranch {
            cs1: self.cs1.grads_like(),
            cs2: self.cs2.grads_like(),
            cs3: self.cs3.grads_like(),
            stem: self.stem.grads_like(),
            enc0: self.enc0.grads_like(),
            down0: self.down0.grads_like(),
            enc1: self.enc1.grads_like(),
            down1: self.down1.grads_like(),
            mid: self.mid.grads_like(),
            zero0: self.zero0.grads_like(),
            zero1: self.zero1.grads_like(),
            zero_mid: self.zero_mid.grads_like(),
        }
    }

    /// Zero-init contract: every projection weight and bias is exactly zero.
    pub fn projections_are_zero(&self) -> bool {
        [&self.zero0, &self.zero1, &self.zero_mid]
            .iter()
            .all(|c| {
                let bias_zero = c.b.as_ref().is_none_or(|b| b.data().iter().all(|&v| v == 0.0));
                c.w.data().iter().all(|&v| v == 0.0) && bias_zero
            })
    }
}

/// Condition image plus injection parameters for one control.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    pub cond: Tensor,
    pub strength: f64,
    pub end_percent: f64,
}

impl ControlSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.strength) {
            return Err(invalid("control_spec", alloc::format!("strength {} outside [0,2]", self.strength)));
        }
        if !(0.0..=1.0).contains(&self.end_percent) {
            return Err(invalid("control_spec", alloc::format!("end_percent {} outside [0,1]", self.end_percent)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

/// Text input: token sequences (trainable path, gradients reach the table)
/// or an already-pooled [B, text_dim] embedding.
pub enum TextInput<'a> {
    Sequences(&'a [TokenSeq]),
    Pooled(Tensor),
}

struct ControlCache {
    cc1: Tensor,
    ca1: Tensor,
    cc2: Tensor,
    ca2: Tensor,
    enc0: BlockCache,
    b_s0: Tensor,
    enc1: BlockCache,
    b_s1: Tensor,
    mid: BlockCache,
    b_m: Tensor,
}

pub struct ForwardCache {
    tfeat: Tensor,
    t_h1: Tensor,
    t_a1: Tensor,
    pooled: Tensor,
    token_ids: Option<Vec<TokenSeq>>,
    emb: Tensor,
    z_t: Tensor,
    enc0: BlockCache,
    s0: Tensor,
    enc1: BlockCache,
    s1: Tensor,
    mid: BlockCache,
    control: Vec<Option<ControlCache>>,
    mp: Tensor,
    m_up: Tensor,
    dec1: BlockCache,
    d1: Tensor,
    d1_up: Tensor,
    dec0: BlockCache,
    d0: Tensor,
    head_g: Tensor,
    head_a: Tensor,
}

fn pooled_from_text(p: &DenoiserParams, text: &TextInput, batch: usize) -> Result<(Tensor, Option<Vec<TokenSeq>>)> {
    match text {
        TextInput::Sequences(seqs) => {
            if seqs.len() != batch {
                return Err(invalid(
                    "denoiser_forward",
                    alloc::format!("{} prompts for batch of {batch}", seqs.len()),
                ));
            }
            let d = p.config.text_dim;
            let mut pooled = Tensor::zeros(&[batch, d]);
            for (bi, seq) in seqs.iter().enumerate() {
                let emb = p.embedder.embed_sequence(seq)?;
                let row = pool_tokens(&emb)?;
                pooled.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(row.data());
            }
            Ok((pooled, Some(seqs.to_vec())))
        }
        TextInput::Pooled(t) => {
            let (b, d) = t.dims2()?;
            if b != batch || d != p.config.text_dim {
                return Err(shape_mismatch("denoiser text", t.shape(), &[batch, p.config.text_dim]));
            }
            Ok((t.clone(), None))
        }
    }
}

/// Full conditional forward pass; returns ε̂ (same shape as z_t) and the
/// recorded sequence needed by [`backward`].
///
/// `controls` pairs each branch with its spec and a per-step active flag;
/// inactive or zero-strength controls are skipped entirely, so their output
/// is bitwise identical to the unconditioned pass.
pub fn forward(
    p: &DenoiserParams,
    z_t: &Tensor,
    ts: &[usize],
    text: &TextInput,
    controls: &[(&ControlBranch, &ControlSpec, bool)],
    want_cache: bool,
) -> Result<(Tensor, Option<ForwardCache>)> {
    let (b, c, h, w) = z_t.dims4()?;
    if c != p.config.latent_channels {
        return Err(shape_mismatch(
            "denoiser latent channels",
            z_t.shape(),
            &[b, p.config.latent_channels, h, w],
        ));
    }
    if ts.len() != b {
        return Err(invalid("denoiser_forward", alloc::format!("{} timesteps for batch of {b}", ts.len())));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(invalid("denoiser_forward", alloc::format!("latent extent {h}x{w} must be divisible by 4")));
    }

    // conditioning embedding
    let tfeat = time_features(ts);
    let t_h1 = p.time1.forward(&tfeat)?;
    let t_a1 = ops::silu(&t_h1)?;
    let t_e = p.time2.forward(&t_a1)?;
    let (pooled, token_ids) = pooled_from_text(p, text, b)?;
    let x_e = p.text_proj.forward(&pooled)?;
    let mut emb = t_e;
    emb.add_scaled(&x_e, 1.0)?;

    // trunk encoder
    let x0 = p.stem.forward(z_t)?;
    let (s0, enc0_cache) = p.enc0.forward(&x0, &emb)?;
    let x1 = p.down0.forward(&s0)?;
    let (s1, enc1_cache) = p.enc1.forward(&x1, &emb)?;
    let x2 = p.down1.forward(&s1)?;
    let (m, mid_cache) = p.mid.forward(&x2, &emb)?;

    // control residuals into the decoder-side skips
    let mut s0p = s0.clone();
    let mut s1p = s1.clone();
    let mut mp = m.clone();
    let mut control_caches: Vec<Option<ControlCache>> = Vec::with_capacity(controls.len());
    for (branch, spec, active) in controls {
        spec.validate()?;
        if !*active || spec.strength == 0.0 {
            control_caches.push(None);
            continue;
        }
        let cc1 = branch.cs1.forward(&spec.cond)?;
        let ca1 = ops::silu(&cc1)?;
        let cc2 = branch.cs2.forward(&ca1)?;
        let ca2 = ops::silu(&cc2)?;
        let hint = branch.cs3.forward(&ca2)?;
        let mut bx0 = branch.stem.forward(z_t)?;
        if !bx0.same_shape(&hint) {
            return Err(shape_mismatch("control condition vs latent", hint.shape(), bx0.shape()));
        }
        bx0.add_scaled(&hint, 1.0)?;
        let (b_s0, benc0) = branch.enc0.forward(&bx0, &emb)?;
        let bx1 = branch.down0.forward(&b_s0)?;
        let (b_s1, benc1) = branch.enc1.forward(&bx1, &emb)?;
        let bx2 = branch.down1.forward(&b_s1)?;
        let (b_m, bmid) = branch.mid.forward(&bx2, &emb)?;
        let r0 = branch.zero0.forward(&b_s0)?;
        let r1 = branch.zero1.forward(&b_s1)?;
        let rm = branch.zero_mid.forward(&b_m)?;
        s0p.add_scaled(&r0, spec.strength)?;
        s1p.add_scaled(&r1, spec.strength)?;
        mp.add_scaled(&rm, spec.strength)?;
        control_caches.push(Some(ControlCache {
            cc1,
            ca1,
            cc2,
            ca2,
            enc0: benc0,
            b_s0,
            enc1: benc1,
            b_s1,
            mid: bmid,
            b_m,
        }));
    }

    // decoder with skip concatenation
    let m_up = ops::interpolate2d(&mp, 2, ops::InterpMode::Nearest)?;
    let u1 = p.up1.forward(&m_up)?;
    let cat1 = concat_channels(&s1p, &u1)?;
    let (d1, dec1_cache) = p.dec1.forward(&cat1, &emb)?;
    let d1_up = ops::interpolate2d(&d1, 2, ops::InterpMode::Nearest)?;
    let u0 = p.up0.forward(&d1_up)?;
    let cat0 = concat_channels(&s0p, &u0)?;
    let (d0, dec0_cache) = p.dec0.forward(&cat0, &emb)?;
    let head_g = ops::group_norm(&d0, GN_GROUPS, &p.head_gamma, &p.head_beta)?;
    let head_a = ops::silu(&head_g)?;
    let out = p.head.forward(&head_a)?;

    let cache = if want_cache {
        Some(ForwardCache {
            tfeat,
            t_h1,
            t_a1,
            pooled,
            token_ids,
            emb,
            z_t: z_t.clone(),
            enc0: enc0_cache,
            s0,
            enc1: enc1_cache,
            s1,
            mid: mid_cache,
            control: control_caches,
            mp,
            m_up,
            dec1: dec1_cache,
            d1,
            d1_up,
            dec0: dec0_cache,
            d0,
            head_g,
            head_a,
        })
    } else {
        None
    };
    Ok((out, cache))
}

/// Reverse pass over a recorded forward: gradients for the trunk and for
/// every control branch that was active (inactive ones get zero grads).
/// Also returns dL/dz_t.
pub fn backward(
    p: &DenoiserParams,
    controls: &[(&ControlBranch, &ControlSpec, bool)],
    cache: &ForwardCache,
    grad_out: &Tensor,
) -> Result<(DenoiserParams, Vec<ControlBranch>, Tensor)> {
    let mut grads = p.grads_like();
    let (batch, _, _, _) = cache.z_t.dims4()?;
    let mut demb = Tensor::zeros(cache.emb.shape());

    // head
    let (dhead_a, dhead) = p.head.backward(&cache.head_a, grad_out)?;
    grads.head = dhead;
    let dhead_g = ops::silu_backward(&cache.head_g, &dhead_a)?;
    let (dd0, dhg, dhb) = ops::group_norm_backward(&cache.d0, GN_GROUPS, &p.head_gamma, &dhead_g)?;
    grads.head_gamma = dhg;
    grads.head_beta = dhb;

    // dec0
    let (dcat0, dec0_grads) = p.dec0.backward(&cache.dec0, &cache.emb, &dd0, &mut demb)?;
    grads.dec0 = dec0_grads;
    let w = p.config.base_width;
    let (ds0p, du0) = split_channels(&dcat0, w)?;
    let (dd1_up, dup0) = p.up0.backward(&cache.d1_up, &du0)?;
    grads.up0 = dup0;
    let (_, _, d1h, d1w) = cache.d1.dims4()?;
    let dd1 = ops::interpolate2d_backward(&dd1_up, 2, ops::InterpMode::Nearest, d1h, d1w)?;

    // dec1
    let (dcat1, dec1_grads) = p.dec1.backward(&cache.dec1, &cache.emb, &dd1, &mut demb)?;
    grads.dec1 = dec1_grads;
    let (ds1p, du1) = split_channels(&dcat1, 2 * w)?;
    let (dm_up, dup1) = p.up1.backward(&cache.m_up, &du1)?;
    grads.up1 = dup1;
    let (_, _, mh, mw) = cache.mp.dims4()?;
    let dmp = ops::interpolate2d_backward(&dm_up, 2, ops::InterpMode::Nearest, mh, mw)?;

    // control branches consume the injection gradients
    let mut control_grads: Vec<ControlBranch> = Vec::with_capacity(controls.len());
    let mut dz_extra = Tensor::zeros(cache.z_t.shape());
    for ((branch, spec, _active), ccache) in controls.iter().zip(cache.control.iter()) {
        let mut bg = branch.grads_like();
        if let Some(cc) = ccache {
            // residual scaling is linear in strength
            let mut dr0 = ds0p.clone();
            dr0.scale(spec.strength);
            let mut dr1 = ds1p.clone();
            dr1.scale(spec.strength);
            let mut drm = dmp.clone();
            drm.scale(spec.strength);
            let (db_s0_z, dz0g) = branch.zero0.backward(&cc.b_s0, &dr0)?;
            bg.zero0 = dz0g;
            let (db_s1_z, dz1g) = branch.zero1.backward(&cc.b_s1, &dr1)?;
            bg.zero1 = dz1g;
            let (db_m, dzmg) = branch.zero_mid.backward(&cc.b_m, &drm)?;
            bg.zero_mid = dzmg;

            let (dbx2, bmid_g) = branch.mid.backward(&cc.mid, &cache.emb, &db_m, &mut demb)?;
            bg.mid = bmid_g;
            let (mut db_s1, bdown1_g) = branch.down1.backward(&cc.b_s1, &dbx2)?;
            bg.down1 = bdown1_g;
            db_s1.add_scaled(&db_s1_z, 1.0)?;
            let (dbx1, benc1_g) = branch.enc1.backward(&cc.enc1, &cache.emb, &db_s1, &mut demb)?;
            bg.enc1 = benc1_g;
            let (mut db_s0, bdown0_g) = branch.down0.backward(&cc.b_s0, &dbx1)?;
            bg.down0 = bdown0_g;
            db_s0.add_scaled(&db_s0_z, 1.0)?;
            let (dbx0, benc0_g) = branch.enc0.backward(&cc.enc0, &cache.emb, &db_s0, &mut demb)?;
            bg.enc0 = benc0_g;
            // bx0 = stem(z_t) + hint
            let (dz, bstem_g) = branch.stem.backward(&cache.z_t, &dbx0)?;
            bg.stem = bstem_g;
            dz_extra.add_scaled(&dz, 1.0)?;
            let (dca2, dcs3) = branch.cs3.backward(&cc.ca2, &dbx0)?;
            bg.cs3 = dcs3;
            let dcc2 = ops::silu_backward(&cc.cc2, &dca2)?;
            let (dca1, dcs2) = branch.cs2.backward(&cc.ca1, &dcc2)?;
            bg.cs2 = dcs2;
            let dcc1 = ops::silu_backward(&cc.cc1, &dca1)?;
            let (_dcond, dcs1) = branch.cs1.backward(&spec.cond, &dcc1)?;
            bg.cs1 = dcs1;
        }
        control_grads.push(bg);
    }

    // trunk gradients through the skip tensors (injection is additive)
    let (dx2, mid_grads) = p.mid.backward(&cache.mid, &cache.emb, &dmp, &mut demb)?;
    grads.mid = mid_grads;
    let (mut ds1, down1_grads) = p.down1.backward(&cache.s1, &dx2)?;
    grads.down1 = down1_grads;
    ds1.add_scaled(&ds1p, 1.0)?;
    let (dx1, enc1_grads) = p.enc1.backward(&cache.enc1, &cache.emb, &ds1, &mut demb)?;
    grads.enc1 = enc1_grads;
    let (mut ds0, down0_grads) = p.down0.backward(&cache.s0, &dx1)?;
    grads.down0 = down0_grads;
    ds0.add_scaled(&ds0p, 1.0)?;
    let (dx0, enc0_grads) = p.enc0.backward(&cache.enc0, &cache.emb, &ds0, &mut demb)?;
    grads.enc0 = enc0_grads;
    let (mut dz_t, stem_grads) = p.stem.backward(&cache.z_t, &dx0)?;
    grads.stem = stem_grads;
    dz_t.add_scaled(&dz_extra, 1.0)?;

    // conditioning embedding: emb = time2(silu(time1(tfeat))) + text_proj(pooled)
    let (dt_a1, time2_grads) = p.time2.backward(&cache.t_a1, &demb)?;
    grads.time2 = time2_grads;
    let dt_h1 = ops::silu_backward(&cache.t_h1, &dt_a1)?;
    let (_, time1_grads) = p.time1.backward(&cache.tfeat, &dt_h1)?;
    grads.time1 = time1_grads;
    let (dpooled, text_proj_grads) = p.text_proj.backward(&cache.pooled, &demb)?;
    grads.text_proj = text_proj_grads;

    // pooled = mean of 77 table rows → scatter into the embedding table
    if let Some(ids) = &cache.token_ids {
        let d = p.config.text_dim;
        let table = grads.embedder.table.data_mut();
        let inv = 1.0 / MAX_TOKENS as f64;
        for bi in 0..batch {
            for &id in ids[bi].iter() {
                for k in 0..d {
                    table[id * d + k] += dpooled.data()[bi * d + k] * inv;
                }
            }
        }
    }

    Ok((grads, control_grads, dz_t))
}

/// Spec-shaped entry point: single timestep for the whole batch, text given
/// as a precomputed [77, text_dim] embedding, at most one control.
pub fn predict_noise(
    p: &DenoiserParams,
    z_t: &Tensor,
    t: usize,
    text: &Tensor,
    control: Option<(&ControlBranch, &ControlSpec)>,
    apply_control: bool,
) -> Result<Tensor> {
    let (b, _, _, _) = z_t.dims4()?;
    let pooled_row = pool_tokens(text)?;
    let d = pooled_row.numel();
    let mut pooled = Tensor::zeros(&[b, d]);
    for bi in 0..b {
        pooled.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(pooled_row.data());
    }
    let ts = alloc::vec![t; b];
    let controls: Vec<(&ControlBranch, &ControlSpec, bool)> = control
        .into_iter()
        .map(|(br, sp)| (br, sp, apply_control))
        .collect();
    let (out, _) = forward(p, z_t, &ts, &TextInput::Pooled(pooled), &controls, false)?;
    Ok(out)
}

/// Scaled control residuals at the three injection points, for
/// instrumentation: strength·zero_proj(branch activations).
pub fn control_residuals(
    p: &DenoiserParams,
    branch: &ControlBranch,
    spec: &ControlSpec,
    z_t: &Tensor,
    ts: &[usize],
    text: &TextInput,
) -> Result<[Tensor; 3]> {
    let (b, _, _, _) = z_t.dims4()?;
    let tfeat = time_features(ts);
    let t_a1 = ops::silu(&p.time1.forward(&tfeat)?)?;
    let t_e = p.time2.forward(&t_a1)?;
    let (pooled, _) = pooled_from_text(p, text, b)?;
    let x_e = p.text_proj.forward(&pooled)?;
    let mut emb = t_e;
    emb.add_scaled(&x_e, 1.0)?;

    let ca1 = ops::silu(&branch.cs1.forward(&spec.cond)?)?;
    let ca2 = ops::silu(&branch.cs2.forward(&ca1)?)?;
    let hint = branch.cs3.forward(&ca2)?;
    let mut bx0 = branch.stem.forward(z_t)?;
    bx0.add_scaled(&hint, 1.0)?;
    let (b_s0, _) = branch.enc0.forward(&bx0, &emb)?;
    let bx1 = branch.down0.forward(&b_s0)?;
    let (b_s1, _) = branch.enc1.forward(&bx1, &emb)?;
    let bx2 = branch.down1.forward(&b_s1)?;
    let (b_m, _) = branch.mid.forward(&bx2, &emb)?;
    let mut r0 = branch.zero0.forward(&b_s0)?;
    let mut r1 = branch.zero1.forward(&b_s1)?;
    let mut rm = branch.zero_mid.forward(&b_m)?;
    r0.scale(spec.strength);
    r1.scale(spec.strength);
    rm.scale(spec.strength);
    Ok([r0, r1, rm])
}

/// Central-difference check of the full loss-through-network gradient on up
/// to `max_probes` randomly selected parameters (trunk and, when present,
/// control branch). The loss is mean squared error against `target`.
#[allow(clippy::too_many_arguments)]
pub fn denoiser_grad_check(
    p: &DenoiserParams,
    control: Option<(&ControlBranch, &ControlSpec)>,
    z_t: &Tensor,
    ts: &[usize],
    prompts: &[TokenSeq],
    target: &Tensor,
    max_probes: usize,
    eps: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let loss_of = |p: &DenoiserParams, branch: Option<&ControlBranch>| -> Result<f64> {
        let controls: Vec<(&ControlBranch, &ControlSpec, bool)> = match (branch, control) {
            (Some(br), Some((_, sp))) => alloc::vec![(br, sp, true)],
            _ => Vec::new(),
        };
        let (out, _) = forward(p, z_t, ts, &TextInput::Sequences(prompts), &controls, false)?;
        let n = out.numel() as f64;
        Ok(out
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    };

    // analytic gradients
    let controls: Vec<(&ControlBranch, &ControlSpec, bool)> = control
        .into_iter()
        .map(|(br, sp)| (br, sp, true))
        .collect();
    let (out, cache) = forward(p, z_t, ts, &TextInput::Sequences(prompts), &controls, true)?;
    let cache = cache.unwrap();
    let n = out.numel() as f64;
    let mut dout = out.clone();
    for (d, t) in dout.data_mut().iter_mut().zip(target.data()) {
        *d = 2.0 * (*d - t) / n;
    }
    let (grads, control_grads, _) = backward(p, &controls, &cache, &dout)?;

    // flatten (name, tensor index, element index) across trunk + branch
    let trunk_named = grads.named();
    let branch_named: Vec<(String, &Tensor)> = control_grads
        .first()
        .map(|g| g.named())
        .unwrap_or_default();
    let trunk_sizes: Vec<usize> = trunk_named.iter().map(|(_, t)| t.numel()).collect();
    let branch_sizes: Vec<usize> = branch_named.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = trunk_sizes.iter().chain(branch_sizes.iter()).sum();
    let probes = max_probes.min(total);

    let mut worst = 0.0f64;
    for _ in 0..probes {
        let flat = rng.next_below(total as u64) as usize;
        // locate the coordinate
        let (in_branch, ti, ei) = {
            let mut rest = flat;
            let mut found = None;
            for (i, sz) in trunk_sizes.iter().enumerate() {
                if rest < *sz {
                    found = Some((false, i, rest));
                    break;
                }
                rest -= sz;
            }
            if found.is_none() {
                for (i, sz) in branch_sizes.iter().enumerate() {
                    if rest < *sz {
                        found = Some((true, i, rest));
                        break;
                    }
                    rest -= sz;
                }
            }
            found.unwrap()
        };
        let analytic = if in_branch {
            branch_named[ti].1.data()[ei]
        } else {
            trunk_named[ti].1.data()[ei]
        };
        let eval = |delta: f64| -> Result<f64> {
            let mut pp = p.clone();
            let mut bb = control.map(|(br, _)| br.clone());
            if in_branch {
                let b = bb.as_mut().unwrap();
                let mut named = b.named_mut();
                named[ti].1.data_mut()[ei] += delta;
            } else {
                let mut named = pp.named_mut();
                named[ti].1.data_mut()[ei] += delta;
            }
            loss_of(&pp, bb.as_ref())
        };
        let fp = eval(eps)?;
        let fm = eval(-eps)?;
        let central = (fp - fm) / (2.0 * eps);
        let rel = math::abs(analytic - central) / (math::abs(analytic) + math::abs(central) + 1e-12);
        worst = math::maxf(worst, rel);
    }
    Ok(worst)
}

/// Adapter implementing the sampler-facing trait for a parameter set with
/// fixed text conditioning and an ordered list of controls.
pub struct ConditionedDenoiser<'a> {
    pub params: &'a DenoiserParams,
    pub prompt: TokenSeq,
    pub controls: Vec<(&'a ControlBranch, ControlSpec)>,
}

impl crate::diffusion::NoisePredictor for ConditionedDenoiser<'_> {
    fn predict(&self, z_t: &Tensor, t: usize, control_active: &[bool]) -> Result<Tensor> {
        let (b, _, _, _) = z_t.dims4()?;
        let ts = alloc::vec![t; b];
        let prompts = alloc::vec![self.prompt; b];
        let attach: Vec<(&ControlBranch, &ControlSpec, bool)> = self
            .controls
            .iter()
            .enumerate()
            .map(|(i, (br, sp))| (*br, sp, control_active.get(i).copied().unwrap_or(false)))
            .collect();
        let (out, _) = forward(self.params, z_t, &ts, &TextInput::Sequences(&prompts), &attach, false)?;
        Ok(out)
    }

    fn control_end_percents(&self) -> Vec<f64> {
        self.controls.iter().map(|(_, sp)| sp.end_percent).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig { latent_channels: 2, base_width: 8, emb_dim: 16, text_dim: 8, cond_channels: 1 }
    }

    fn prompt() -> TokenSeq {
        text::sequence_ids(&text::tokenize(&["field", "road"]))
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = DenoiserConfig::default();
        let a = init_denoiser(&cfg, &mut Rng::new(3)).unwrap();
        let b = init_denoiser(&cfg, &mut Rng::new(3)).unwrap();
        for ((na, ta), (_, tb)) in a.named().iter().zip(b.named().iter()) {
            assert_eq!(ta, tb, "tensor {na} differs between same-seed inits");
        }
        let c = init_denoiser(&cfg, &mut Rng::new(4)).unwrap();
        assert_ne!(a.stem.w, c.stem.w);
    }

    #[test]
    fn control_projections_zero_at_init() {
        let cfg = small_config();
        let p = init_denoiser(&cfg, &mut Rng::new(5)).unwrap();
        let branch = init_control(&p, &mut Rng::new(6));
        assert!(branch.projections_are_zero());
    }

    #[test]
    fn param_count_matches_hand_formula() {
        // formula derived before coding the net, for base=16, levels=2,
        // latent=4, emb=64, text_dim=16, vocab=64, time features 32
        let cfg = DenoiserConfig::default();
        let p = init_denoiser(&cfg, &mut Rng::new(7)).unwrap();
        let (w, e, d, lc, v) = (16usize, 64usize, 16usize, 4usize, text::vocab_size());
        let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
        let lin = |n: usize, m: usize| n * m + m;
        // block convs carry no bias (norm follows); emb is injected post-norm
        let block = |cin: usize, cout: usize| 9 * cin * cout + 2 * cout + lin(e, cout);
        let expected = v * d                    // token table
            + lin(d, e)                          // text projection
            + lin(TIME_FEATURES, e) + lin(e, e)  // time MLP
            + conv(lc, w, 3)                     // stem
            + block(w, w)                        // enc0
            + conv(w, 2 * w, 3)                  // down0
            + block(2 * w, 2 * w)                // enc1
            + conv(2 * w, 4 * w, 3)              // down1
            + block(4 * w, 4 * w)                // mid
            + conv(4 * w, 2 * w, 3)              // up1
            + block(4 * w, 2 * w)                // dec1
            + conv(2 * w, w, 3)                  // up0
            + block(2 * w, w)                    // dec0
            + 2 * w                              // head group norm
            + conv(w, lc, 3); // head
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn output_shape_matches_input() {
        let cfg = small_config();
        let p = init_denoiser(&cfg, &mut Rng::new(8)).unwrap();
        let mut rng = Rng::new(9);
        let z = Tensor::randn(&[2, 2, 8, 8], &mut rng);
        let prompts = [prompt(), prompt()];
        let (out, _) = forward(&p, &z, &[3, 7], &TextInput::Sequences(&prompts), &[], false).unwrap();
        assert_eq!(out.shape(), z.shape());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let p = init_denoiser(&cfg, &mut Rng::new(10)).unwrap();
        let mut rng = Rng::new(11);
        let z = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let prompts = [prompt()];
        let a = forward(&p, &z, &[5], &TextInput::Sequences(&prompts), &[], false).unwrap().0;
        let b = forward(&p, &z, &[5], &TextInput::Sequences(&prompts), &[], false).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn fresh_control_branch_is_bitwise_noop() {
        let cfg = small_config();
        let p = init_denoiser(&cfg, &mut Rng::new(12)).unwrap();
        let branch = init_control(&p, &mut Rng::new(13));
        let mut rng = Rng::new(14);
        for trial in 0..10 {
            let z = Tensor::randn(&[1, 2, 8, 8], &mut rng);
            let cond = Tensor::randn(&[1, 1, 64, 64], &mut rng).map(|v| v.abs().min(1.0));
            let spec = ControlSpec { cond, strength: 1.0, end_percent: 0.8 };
            let prompts = [prompt()];
            let base = forward(&p, &z, &[9], &TextInput::Sequences(&prompts), &[], false).unwrap().0;
            let with = forward(
                &p,
                &z,
                &[9],
                &TextInput::Sequences(&prompts),
                &[(&branch, &spec, true)],
                false,
            )
            .unwrap()
            .0;
            assert_eq!(base, with, "trial {trial}: zero-init branch changed the output");
        }
    }

    #[test]
    fn strength_zero_is_bitwise_noop_even_when_trained() {
        let cfg = small_config();
        let p = init_denoiser(&cfg, &mut Rng::new(15)).unwrap();
        let mut branch = init_control(&p, &mut Rng::new(16));
        // fake a trained branch: non-zero projections
        let mut rng = Rng::new(17);
        for (_, t) in branch.named_mut() {
            *t = Tensor::randn(t.shape(), &mut rng);
        }
        let z = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let cond = Tensor::randn(&[1, 1, 64, 64], &mut rng);
        let spec = ControlSpec { cond, strength: 0.0, end_percent: 1.0 };
        let prompts = [prompt()];
        let base = forward(&p, &z, &[4], &TextInput::Sequences(&prompts), &[], false).unwrap().0;
        let with = forward(&p, &z, &[4], &TextInput::Sequences(&prompts), &[(&branch, &spec, true)], false)
            .unwrap()
            .0;
        assert_eq!(base, with);
    }

    #[test]
    fn residual_injection_scales_linearly_with_strength() {
        let cfg = small_config();
        let p = init_denoiser(&cfg, &mut Rng::new(18)).unwrap();
        let mut branch = init_control(&p, &mut Rng::new(19));
        let mut rng = Rng::new(20);
        for (_, t) in branch.named_mut() {
            *t = Tensor::randn(t.shape(), &mut rng);
        }
        let z = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let cond = Tensor::randn(&[1, 1, 64, 64], &mut rng);
        let half = ControlSpec { cond: cond.clone(), strength: 0.5, end_percent: 1.0 };
        let full = ControlSpec { cond, strength: 1.0, end_percent: 1.0 };
        let prompts = [prompt()];
        let r_half = control_residuals(&p, &branch, &half, &z, &[6], &TextInput::Sequences(&prompts)).unwrap();
        let r_full = control_residuals(&p, &branch, &full, &z, &[6], &TextInput::Sequences(&prompts)).unwrap();
        for (rh, rf) in r_half.iter().zip(r_full.iter()) {
            for (a, b) in rh.data().iter().zip(rf.data()) {
                assert_eq!(a * 2.0, *b, "residual does not halve exactly");
            }
        }
    }

    #[test]
    fn grad_check_through_network() {
        let cfg = small_config();
        let p = init_denoiser(&cfg, &mut Rng::new(21)).unwrap();
        let mut rng = Rng::new(22);
        let z = Tensor::randn(&[2, 2, 8, 8], &mut rng);
        let target = Tensor::randn(&[2, 2, 8, 8], &mut rng);
        let prompts = [prompt(), text::sequence_ids(&text::tokenize(&["water", "dark"]))];
        let err = denoiser_grad_check(&p, None, &z, &[3, 11], &prompts, &target, 120, 1e-5, &mut rng).unwrap();
        assert!(err < 1e-4, "denoiser grad rel err {err}");
    }

    #[test]
    fn grad_check_with_control_branch() {
        let cfg = small_config();
        let p = init_denoiser(&cfg, &mut Rng::new(23)).unwrap();
        let mut branch = init_control(&p, &mut Rng::new(24));
        let mut rng = Rng::new(25);
        // randomize projections so branch gradients are exercised
        for (name, t) in branch.named_mut() {
            if name.contains("zero") {
                let mut r = Tensor::randn(t.shape(), &mut rng);
                r.scale(0.1);
                *t = r;
            }
        }
        let z = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let cond = Tensor::randn(&[1, 1, 64, 64], &mut rng);
        let spec = ControlSpec { cond, strength: 0.8, end_percent: 1.0 };
        let target = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let prompts = [prompt()];
        let err = denoiser_grad_check(
            &p,
            Some((&branch, &spec)),
            &z,
            &[7],
            &prompts,
            &target,
            120,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-4, "control grad rel err {err}");
    }
}
