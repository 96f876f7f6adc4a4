//! Integer-factor spatial resampling.
//!
//! Bilinear interpolation uses half-pixel-center alignment: source coordinate
//! `(dst + 0.5)/factor − 0.5`, edge-clamped. This convention is fixed here and
//! in the tests; constants map to constants under both modes.

use crate::error::{invalid, Result};
use crate::math;
use crate::tensor::Tensor;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    Nearest,
    Bilinear,
}

impl InterpMode {
    pub fn name(self) -> &'static str {
        match self {
            InterpMode::Nearest => "nearest",
            InterpMode::Bilinear => "bilinear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(InterpMode::Nearest),
            "bilinear" => Ok(InterpMode::Bilinear),
            other => Err(invalid("interp_mode", alloc::format!("unknown mode `{other}`"))),
        }
    }
}

/// Per-axis bilinear taps: (low index, high index, high-side weight).
fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|j| {
            let src = (j as f64 + 0.5) / factor as f64 - 0.5;
            let i0f = math::floor(src);
            let t = src - i0f;
            let clamp = |v: isize| v.clamp(0, n_in as isize - 1) as usize;
            (clamp(i0f as isize), clamp(i0f as isize + 1), t)
        })
        .collect()
}

/// Upscale [B,C,H,W] by an integer factor per side.
pub fn interpolate2d(x: &Tensor, factor: usize, mode: InterpMode) -> Result<Tensor> {
    if factor == 0 {
        return Err(invalid("interpolate2d", "factor must be a positive integer"));
    }
    let (b, c, h, w) = x.dims4()?;
    if factor == 1 {
        return Ok(x.clone());
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    match mode {
        InterpMode::Nearest => {
            for bc in 0..b * c {
                let src = &x.data()[bc * h * w..(bc + 1) * h * w];
                let dst = &mut out.data_mut()[bc * ho * wo..(bc + 1) * ho * wo];
                for y in 0..ho {
                    let sy = y / factor;
                    for xo in 0..wo {
                        dst[y * wo + xo] = src[sy * w + xo / factor];
                    }
                }
            }
        }
        InterpMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for bc in 0..b * c {
                let src = &x.data()[bc * h * w..(bc + 1) * h * w];
                let dst = &mut out.data_mut()[bc * ho * wo..(bc + 1) * ho * wo];
                for y in 0..ho {
                    let (y0, y1, wy) = ty[y];
                    for xo in 0..wo {
                        let (x0, x1, wx) = tx[xo];
                        let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                        let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                        dst[y * wo + xo] = top * (1.0 - wy) + bot * wy;
                    }
                }
            }
        }
    }
    out.ensure_finite("interpolate2d")?;
    Ok(out)
}

/// Adjoint of `interpolate2d`: scatter output-space gradients back to the
/// (in_h, in_w) grid.
pub fn interpolate2d_backward(
    grad_out: &Tensor,
    factor: usize,
    mode: InterpMode,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    let (b, c, ho, wo) = grad_out.dims4()?;
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    if ho != in_h * factor || wo != in_w * factor {
        return Err(invalid(
            "interpolate2d_backward",
            alloc::format!("grad shape {:?} does not match {in_h}x{in_w} x{factor}", grad_out.shape()),
        ));
    }
    let mut grad_in = Tensor::zeros(&[b, c, in_h, in_w]);
    match mode {
        InterpMode::Nearest => {
            for bc in 0..b * c {
                let g = &grad_out.data()[bc * ho * wo..(bc + 1) * ho * wo];
                let dst = &mut grad_in.data_mut()[bc * in_h * in_w..(bc + 1) * in_h * in_w];
                for y in 0..ho {
                    let sy = y / factor;
                    for xo in 0..wo {
                        dst[sy * in_w + xo / factor] += g[y * wo + xo];
                    }
                }
            }
        }
        InterpMode::Bilinear => {
            let ty = bilinear_taps(in_h, factor);
            let tx = bilinear_taps(in_w, factor);
            for bc in 0..b * c {
                let g = &grad_out.data()[bc * ho * wo..(bc + 1) * ho * wo];
                let dst = &mut grad_in.data_mut()[bc * in_h * in_w..(bc + 1) * in_h * in_w];
                for y in 0..ho {
                    let (y0, y1, wy) = ty[y];
                    for xo in 0..wo {
                        let (x0, x1, wx) = tx[xo];
                        let gv = g[y * wo + xo];
                        dst[y0 * in_w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                        dst[y0 * in_w + x1] += gv * (1.0 - wy) * wx;
                        dst[y1 * in_w + x0] += gv * wy * (1.0 - wx);
                        dst[y1 * in_w + x1] += gv * wy * wx;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Mean over factor×factor blocks; requires the factor to divide both extents.
pub fn box_downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(invalid("box_downsample", "factor must be >= 1"));
    }
    let (b, c, h, w) = x.dims4()?;
    if factor == 1 {
        return Ok(x.clone());
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(invalid(
            "box_downsample",
            alloc::format!("factor {factor} does not divide extents {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    for bc in 0..b * c {
        let src = &x.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out.data_mut()[bc * ho * wo..(bc + 1) * ho * wo];
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = &src[(y * factor + dy) * w + xo * factor..][..factor];
                    for v in row {
                        acc += v;
                    }
                }
                dst[y * wo + xo] = acc * inv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::grad_check;
    use crate::rng::Rng;

    #[test]
    fn factor_one_is_identity() {
        let mut rng = Rng::new(40);
        let x = Tensor::randn(&[1, 2, 3, 3], &mut rng);
        for mode in [InterpMode::Nearest, InterpMode::Bilinear] {
            assert_eq!(interpolate2d(&x, 1, mode).unwrap(), x);
        }
    }

    #[test]
    fn constants_map_to_constants() {
        let x = Tensor::full(&[1, 1, 4, 4], 0.37);
        for mode in [InterpMode::Nearest, InterpMode::Bilinear] {
            for factor in [2usize, 3] {
                let y = interpolate2d(&x, factor, mode).unwrap();
                assert_eq!(y.shape(), &[1, 1, 4 * factor, 4 * factor]);
                for v in y.data() {
                    assert!((v - 0.37).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn bilinear_x2_matches_hand_table() {
        // half-pixel centers on [[0,1],[2,3]], worked out by hand
        let x = Tensor::new(&[1, 1, 2, 2], alloc::vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = interpolate2d(&x, 2, InterpMode::Bilinear).unwrap();
        let expected = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, b) in y.data().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn nearest_copies_blocks() {
        let x = Tensor::new(&[1, 1, 2, 2], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = interpolate2d(&x, 2, InterpMode::Nearest).unwrap();
        let expected = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(41);
        for mode in [InterpMode::Nearest, InterpMode::Bilinear] {
            let x = Tensor::randn(&[1, 2, 3, 4], &mut rng);
            let proj = Tensor::randn(&[1, 2, 6, 8], &mut rng);
            let f = |xs: &[Tensor]| {
                let y = interpolate2d(&xs[0], 2, mode).unwrap();
                let loss = y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
                let g = interpolate2d_backward(&proj, 2, mode, 3, 4).unwrap();
                (loss, alloc::vec![g])
            };
            let err = grad_check(&f, &[x], 1e-5);
            assert!(err < 1e-8, "{} grad rel err {err}", mode.name());
        }
    }

    #[test]
    fn box_downsample_averages() {
        let x = Tensor::new(&[1, 1, 2, 4], alloc::vec![0.0, 2.0, 4.0, 6.0, 2.0, 0.0, 6.0, 4.0]).unwrap();
        let y = box_downsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[1.0, 5.0]);
    }

    #[test]
    fn box_downsample_rejects_non_dividing_factor() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(box_downsample(&x, 2).is_err());
    }
}
