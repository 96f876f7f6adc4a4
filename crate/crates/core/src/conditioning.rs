//! Spatial-condition extractors: Canny edge maps and tile (blur) maps.
//!
//! Canny runs the classic stages with fixed conventions, so an independent
//! straight-line reimplementation reproduces it bit for bit:
//!   1. Gaussian smoothing, truncated kernel radius ⌈3σ⌉, weights
//!      exp(−k²/2σ²) normalized by their sum, clamp-to-edge padding,
//!      separable row pass then column pass, taps accumulated in ascending
//!      offset order;
//!   2. Sobel gradients ([-1 0 1; -2 0 2; -1 0 1] and its transpose),
//!      magnitude √(gx²+gy²), border ring left at zero;
//!   3. non-maximum suppression with 4-sector angle quantization done by
//!      |gy|/|gx| comparison against tan 22.5°/tan 67.5° (no atan2); a pixel
//!      survives iff it is strictly greater than its lower-coordinate
//!      neighbor and ≥ its higher-coordinate neighbor along the gradient;
//!   4. double-threshold hysteresis with 8-connectivity; thresholds are
//!      fractions of the maximum gradient magnitude, which makes the result
//!      invariant to affine intensity rescaling.

use crate::error::{invalid, Result};
use crate::math;
use crate::ops;
use crate::tensor::Tensor;
use alloc::string::String;
use alloc::vec::Vec;

const TAN_22_5: f64 = 0.41421356237309503; // √2 − 1
const TAN_67_5: f64 = 2.414213562373095; // √2 + 1

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    Canny,
    Tile,
}

impl ConditionKind {
    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Canny => "canny",
            ConditionKind::Tile => "tile",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "canny" => Ok(ConditionKind::Canny),
            "tile" => Ok(ConditionKind::Tile),
            other => Err(invalid("condition_kind", alloc::format!("unknown kind `{other}`"))),
        }
    }
}

/// Extracted condition image with its provenance (source + parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMap {
    pub kind: ConditionKind,
    pub image: Tensor,
    pub provenance: String,
}

fn single_plane(img: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    let (b, c, h, w) = img.dims4()?;
    if b != 1 || c != 1 {
        return Err(invalid(context, alloc::format!("expected [1,1,H,W], got {:?}", img.shape())));
    }
    Ok((h, w))
}

/// Separable Gaussian blur with clamp-to-edge padding.
pub(crate) fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = math::ceil(3.0 * sigma) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for k in -(radius as isize)..=(radius as isize) {
        let v = math::exp(-(k as f64 * k as f64) / (2.0 * sigma * sigma));
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = alloc::vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius as isize, w);
                acc += kv * plane[y * w + sx];
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = alloc::vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius as isize, h);
                acc += kv * rows[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Classic staged Canny detector; `low`/`high` are fractions of the maximum
/// gradient magnitude. Output is binary {0, 1}.
pub fn canny(img: &Tensor, sigma: f64, low: f64, high: f64) -> Result<ConditionMap> {
    let (h, w) = single_plane(img, "canny")?;
    if sigma <= 0.0 {
        return Err(invalid("canny", "sigma must be positive"));
    }
    if !(0.0 < low && low < high && high <= 1.0) {
        return Err(invalid(
            "canny",
            alloc::format!("thresholds must satisfy 0 < low < high <= 1, got {low}/{high}"),
        ));
    }

    let blurred = gaussian_blur(img.data(), h, w, sigma);

    // Sobel gradients, border ring stays zero
    let mut gx = alloc::vec![0.0; h * w];
    let mut gy = alloc::vec![0.0; h * w];
    let mut mag = alloc::vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            let p = |dy: isize, dx: isize| blurred[((y as isize + dy) as usize) * w + (x as isize + dx) as usize];
            let sx = -p(-1, -1) + p(-1, 1) - 2.0 * p(0, -1) + 2.0 * p(0, 1) - p(1, -1) + p(1, 1);
            let sy = -p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1) + p(1, -1) + 2.0 * p(1, 0) + p(1, 1);
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
            mag[y * w + x] = math::sqrt(sx * sx + sy * sy);
        }
    }

    // non-maximum suppression
    let mut thin = alloc::vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            let m = mag[y * w + x];
            if m == 0.0 {
                continue;
            }
            let (ax, ay) = (math::abs(gx[y * w + x]), math::abs(gy[y * w + x]));
            // (n1, n2): lower-coordinate neighbor first
            let (n1, n2) = if ay <= ax * TAN_22_5 {
                (mag[y * w + x - 1], mag[y * w + x + 1])
            } else if ay >= ax * TAN_67_5 {
                (mag[(y - 1) * w + x], mag[(y + 1) * w + x])
            } else if gx[y * w + x] * gy[y * w + x] > 0.0 {
                (mag[(y - 1) * w + x - 1], mag[(y + 1) * w + x + 1])
            } else {
                (mag[(y - 1) * w + x + 1], mag[(y + 1) * w + x - 1])
            };
            if m > n1 && m >= n2 {
                thin[y * w + x] = m;
            }
        }
    }

    // double threshold + hysteresis (8-connected BFS from strong pixels)
    let g_max = mag.iter().copied().fold(0.0, math::maxf);
    let mut out = Tensor::zeros(&[1, 1, h, w]);
    if g_max > 0.0 {
        let low_t = low * g_max;
        let high_t = high * g_max;
        let edges = out.data_mut();
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if thin[y * w + x] >= high_t && edges[y * w + x] == 0.0 {
                    edges[y * w + x] = 1.0;
                    stack.push((y, x));
                    while let Some((cy, cx)) = stack.pop() {
                        for dy in -1isize..=1 {
                            for dx in -1isize..=1 {
                                if dy == 0 && dx == 0 {
                                    continue;
                                }
                                let ny = cy as isize + dy;
                                let nx = cx as isize + dx;
                                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                                    continue;
                                }
                                let ni = ny as usize * w + nx as usize;
                                if edges[ni] == 0.0 && thin[ni] >= low_t {
                                    edges[ni] = 1.0;
                                    stack.push((ny as usize, nx as usize));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConditionMap {
        kind: ConditionKind::Canny,
        image: out,
        provenance: alloc::format!("canny sigma={sigma} low={low} high={high}"),
    })
}

/// Low-frequency structure map: box-downsample by `factor`, then upsample
/// back with nearest-neighbor replication, so f-block-constant images pass
/// through unchanged.
pub fn tile_condition(img: &Tensor, factor: usize) -> Result<ConditionMap> {
    let (h, w) = single_plane(img, "tile_condition")?;
    if factor == 0 {
        return Err(invalid("tile_condition", "factor must be >= 1"));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(invalid(
            "tile_condition",
            alloc::format!("factor {factor} does not divide extents {h}x{w}"),
        ));
    }
    let image = if factor == 1 {
        img.clone()
    } else {
        let down = ops::box_downsample(img, factor)?;
        ops::interpolate2d(&down, factor, ops::InterpMode::Nearest)?
    };
    Ok(ConditionMap {
        kind: ConditionKind::Tile,
        image,
        provenance: alloc::format!("tile factor={factor}"),
    })
}
