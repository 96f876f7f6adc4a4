//! Synthetic SAR-like scene generation.
//!
//! Scenes are axis-aligned reflectivity primitives (water, field, road,
//! building, forest) over a constant field background, rendered as mean
//! intensity at the finest tier (sd40); coarser tiers are box-downsampled.
//! Speckle is fully developed multiplicative gamma noise on intensity:
//! L-look speckle multiplies each pixel by Gamma(L, 1/L) (unit mean), so
//! L=1 gives exponentially distributed intensity. Amplitude images are
//! standardized to [0,1] by square root, quantile clipping, and an affine
//! remap.

use crate::error::{invalid, Result};
use crate::math;
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// Surface classes with their mean reflectivity (intensity units) and the
/// amplitude of the smooth texture modulation painted inside primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceClass {
    Water,
    Field,
    Road,
    Building,
    Forest,
}

pub const ALL_CLASSES: [SurfaceClass; 5] = [
    SurfaceClass::Water,
    SurfaceClass::Field,
    SurfaceClass::Road,
    SurfaceClass::Building,
    SurfaceClass::Forest,
];

impl SurfaceClass {
    pub fn token(self) -> &'static str {
        match self {
            SurfaceClass::Water => "water",
            SurfaceClass::Field => "field",
            SurfaceClass::Road => "road",
            SurfaceClass::Building => "building",
            SurfaceClass::Forest => "forest",
        }
    }

    pub fn mean_intensity(self) -> f64 {
        match self {
            SurfaceClass::Water => 0.03,
            SurfaceClass::Field => 0.22,
            SurfaceClass::Road => 0.07,
            SurfaceClass::Building => 0.85,
            SurfaceClass::Forest => 0.45,
        }
    }

    fn texture_amp(self) -> f64 {
        match self {
            SurfaceClass::Water => 0.03,
            SurfaceClass::Field => 0.12,
            SurfaceClass::Road => 0.04,
            SurfaceClass::Building => 0.08,
            SurfaceClass::Forest => 0.15,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            SurfaceClass::Water => 0,
            SurfaceClass::Field => 1,
            SurfaceClass::Road => 2,
            SurfaceClass::Building => 3,
            SurfaceClass::Forest => 4,
        }
    }
}

/// Resolution tier tags (toy analogs of 160/80/40 cm products).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResTag {
    Sd40,
    Sd80,
    Sd160,
}

pub const ALL_TIERS: [ResTag; 3] = [ResTag::Sd40, ResTag::Sd80, ResTag::Sd160];

impl ResTag {
    pub fn token(self) -> &'static str {
        match self {
            ResTag::Sd40 => "sd40",
            ResTag::Sd80 => "sd80",
            ResTag::Sd160 => "sd160",
        }
    }

    /// Box-downsample factor relative to the sd40 render.
    pub fn factor(self) -> usize {
        match self {
            ResTag::Sd40 => 1,
            ResTag::Sd80 => 2,
            ResTag::Sd160 => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sd40" => Ok(ResTag::Sd40),
            "sd80" => Ok(ResTag::Sd80),
            "sd160" => Ok(ResTag::Sd160),
            other => Err(invalid("res_tag", alloc::format!("unknown tier `{other}`"))),
        }
    }
}

/// Axis-aligned rectangle (lines are thin rectangles), half-open bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub class: SurfaceClass,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// texture wavelength in pixels and phase offsets
    pub wavelength: f64,
    pub phase_x: f64,
    pub phase_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub extent: usize,
    pub background: SurfaceClass,
    pub primitives: Vec<Primitive>,
}

/// Deterministic random scene layout for a seed.
pub fn random_scene(seed: u64, extent: usize) -> SceneSpec {
    let mut rng = Rng::with_stream(seed, 0x5CE4E);
    let n = 5 + rng.next_below(6) as usize;
    let mut primitives = Vec::with_capacity(n);
    for _ in 0..n {
        let class = match rng.next_below(4) {
            0 => SurfaceClass::Water,
            1 => SurfaceClass::Road,
            2 => SurfaceClass::Building,
            _ => SurfaceClass::Forest,
        };
        let (w, h) = match class {
            SurfaceClass::Water | SurfaceClass::Forest => (
                32 + rng.next_below((extent / 3).max(1) as u64) as usize,
                32 + rng.next_below((extent / 3).max(1) as u64) as usize,
            ),
            SurfaceClass::Building => (
                8 + rng.next_below(40) as usize,
                8 + rng.next_below(40) as usize,
            ),
            // roads: thin and long, alternating orientation
            _ => {
                if rng.next_below(2) == 0 {
                    (4 + rng.next_below(4) as usize, extent / 2 + rng.next_below((extent / 2) as u64) as usize)
                } else {
                    (extent / 2 + rng.next_below((extent / 2) as u64) as usize, 4 + rng.next_below(4) as usize)
                }
            }
        };
        let w = w.min(extent);
        let h = h.min(extent);
        let x0 = rng.next_below((extent - w + 1) as u64) as usize;
        let y0 = rng.next_below((extent - h + 1) as u64) as usize;
        primitives.push(Primitive {
            class,
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
            wavelength: 16.0 + rng.next_f64() * 48.0,
            phase_x: rng.next_f64(),
            phase_y: rng.next_f64(),
        });
    }
    SceneSpec { seed, extent, background: SurfaceClass::Field, primitives }
}

/// Noiseless mean-intensity render at the requested tier; sd80/sd160 are
/// exact 2×2 / 4×4 box averages of the sd40 render.
pub fn render_reflectivity(scene: &SceneSpec, tag: ResTag) -> Result<Tensor> {
    let full = render_full(scene)?;
    let f = tag.factor();
    if f == 1 {
        Ok(full)
    } else {
        ops::box_downsample(&full, f)
    }
}

fn render_full(scene: &SceneSpec) -> Result<Tensor> {
    let e = scene.extent;
    if e == 0 {
        return Err(invalid("render_reflectivity", "empty extent"));
    }
    let mut img = Tensor::full(&[1, 1, e, e], scene.background.mean_intensity());
    for p in &scene.primitives {
        if p.x1 > e || p.y1 > e || p.x0 >= p.x1 || p.y0 >= p.y1 {
            return Err(invalid("render_reflectivity", "primitive outside extent"));
        }
        let mean = p.class.mean_intensity();
        let amp = p.class.texture_amp();
        let tau = 2.0 * core::f64::consts::PI;
        for y in p.y0..p.y1 {
            for x in p.x0..p.x1 {
                let tex = 1.0
                    + amp
                        * math::sin(tau * (x as f64 / p.wavelength + p.phase_x))
                        * math::sin(tau * (y as f64 / p.wavelength + p.phase_y));
                img.data_mut()[y * e + x] = math::maxf(mean * tex, 0.05 * mean);
            }
        }
    }
    Ok(img)
}

/// Per-pixel class ids at sd40 resolution (background under primitives in
/// paint order), used to derive captions.
pub fn render_class_map(scene: &SceneSpec) -> Vec<u8> {
    let e = scene.extent;
    let mut map = alloc::vec![scene.background.id(); e * e];
    for p in &scene.primitives {
        for y in p.y0..p.y1 {
            for x in p.x0..p.x1 {
                map[y * e + x] = p.class.id();
            }
        }
    }
    map
}

/// Class tokens present in a rectangular sd40-space region, in canonical
/// class order.
pub fn classes_in_region(
    class_map: &[u8],
    extent: usize,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
) -> Vec<&'static str> {
    let mut present = [false; 5];
    for y in y0..y1 {
        for x in x0..x1 {
            present[class_map[y * extent + x] as usize] = true;
        }
    }
    ALL_CLASSES
        .iter()
        .filter(|c| present[c.id() as usize])
        .map(|c| c.token())
        .collect()
}

/// Multiply every pixel by an independent Gamma(L, 1/L) variate (unit mean).
pub fn apply_speckle(intensity: &Tensor, looks: u32, rng: &mut Rng) -> Result<Tensor> {
    if looks == 0 {
        return Err(invalid("apply_speckle", "looks must be >= 1"));
    }
    if intensity.data().iter().any(|&v| v < 0.0) {
        return Err(invalid("apply_speckle", "intensity must be non-negative"));
    }
    let mut out = intensity.clone();
    for v in out.data_mut() {
        *v *= rng.next_gamma_looks(looks);
    }
    Ok(out)
}

/// √intensity, clipped at the given per-image quantile, affinely mapped to
/// [0, 1]. Degenerate cases: an all-zero image returns zeros; a zero-span
/// (constant) image returns ones.
pub fn standardize_dynamics(intensity: &Tensor, clip_quantile: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&clip_quantile) {
        return Err(invalid("standardize_dynamics", "clip quantile must lie in [0,1]"));
    }
    if intensity.data().iter().any(|&v| v < 0.0) {
        return Err(invalid("standardize_dynamics", "intensity must be non-negative"));
    }
    let amplitude = intensity.map(math::sqrt);
    let mut sorted: Vec<f64> = amplitude.data().to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let q_idx = math::round(clip_quantile * (n - 1) as f64) as usize;
    let clip = sorted[q_idx.min(n - 1)];
    if clip == 0.0 {
        return Ok(amplitude.zeros_like());
    }
    let lo = sorted[0].min(clip);
    let span = clip - lo;
    if span == 0.0 {
        return Ok(Tensor::full(amplitude.shape(), 1.0));
    }
    Ok(amplitude.map(|a| ((math::minf(a, clip) - lo) / span).clamp(0.0, 1.0)))
}

/// Row-major tiles of size `tile_size` at the given stride; partial edge
/// tiles are discarded.
pub fn tile(image: &Tensor, tile_size: usize, stride: usize) -> Result<Vec<Tensor>> {
    let (b, c, h, w) = image.dims4()?;
    if b != 1 || c != 1 {
        return Err(invalid("tile", "expected a single [1,1,H,W] image"));
    }
    if tile_size == 0 || stride == 0 {
        return Err(invalid("tile", "tile size and stride must be >= 1"));
    }
    if tile_size > h || tile_size > w {
        return Err(invalid(
            "tile",
            alloc::format!("tile {tile_size} larger than image {h}x{w}"),
        ));
    }
    let mut out = Vec::new();
    let mut y = 0;
    while y + tile_size <= h {
        let mut x = 0;
        while x + tile_size <= w {
            let mut t = Tensor::zeros(&[1, 1, tile_size, tile_size]);
            for ty in 0..tile_size {
                let src = &image.data()[(y + ty) * w + x..(y + ty) * w + x + tile_size];
                t.data_mut()[ty * tile_size..(ty + 1) * tile_size].copy_from_slice(src);
            }
            out.push(t);
            x += stride;
        }
        y += stride;
    }
    Ok(out)
}

/// Grid origin of tile `idx` in the tiling produced by [`tile`].
pub fn tile_origin(h: usize, w: usize, tile_size: usize, stride: usize, idx: usize) -> (usize, usize) {
    let per_row = (w - tile_size) / stride + 1;
    let _ = h;
    let (ty, tx) = (idx / per_row, idx % per_row);
    (ty * stride, tx * stride)
}
