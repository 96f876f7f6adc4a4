//! Group normalization.

use crate::error::{invalid, shape_mismatch, Result};
use crate::math;
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

fn check(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(invalid(
            "group_norm",
            alloc::format!("groups {groups} must divide channels {c}"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_mismatch("group_norm scale/shift", gamma.shape(), &[c]));
    }
    Ok((b, c, h, w))
}

/// Normalize each (batch, group) slab to zero mean / unit variance, then
/// apply per-channel scale and shift.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = check(x, groups, gamma, beta)?;
    let cpg = c / groups;
    let m = cpg * h * w;
    let hw = h * w;
    let mut out = x.zeros_like();
    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * cpg) * hw;
            let slab = &x.data()[start..start + m];
            let mean = slab.iter().sum::<f64>() / m as f64;
            let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let invstd = 1.0 / math::sqrt(var + GN_EPS);
            let dst = &mut out.data_mut()[start..start + m];
            for ci in 0..cpg {
                let g = gamma.data()[gi * cpg + ci];
                let be = beta.data()[gi * cpg + ci];
                for i in 0..hw {
                    let e = ci * hw + i;
                    dst[e] = (slab[e] - mean) * invstd * g + be;
                }
            }
        }
    }
    out.ensure_finite("group_norm")?;
    Ok(out)
}

/// Gradients of `group_norm` w.r.t. input, gamma, and beta.
pub fn group_norm_backward(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    if grad_out.shape() != x.shape() {
        return Err(shape_mismatch("group_norm_backward", grad_out.shape(), x.shape()));
    }
    let cpg = c / groups;
    let m = cpg * h * w;
    let hw = h * w;
    let mut grad_x = x.zeros_like();
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * cpg) * hw;
            let slab = &x.data()[start..start + m];
            let gout = &grad_out.data()[start..start + m];
            let mean = slab.iter().sum::<f64>() / m as f64;
            let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let invstd = 1.0 / math::sqrt(var + GN_EPS);

            // per-channel param grads and the two group-wide reductions
            let mut s1 = 0.0; // Σ γ·g
            let mut s2 = 0.0; // Σ γ·g·x̂
            for ci in 0..cpg {
                let g = gamma.data()[gi * cpg + ci];
                let mut dg = 0.0;
                let mut db = 0.0;
                for i in 0..hw {
                    let e = ci * hw + i;
                    let xhat = (slab[e] - mean) * invstd;
                    dg += gout[e] * xhat;
                    db += gout[e];
                    let gh = gout[e] * g;
                    s1 += gh;
                    s2 += gh * xhat;
                }
                grad_gamma.data_mut()[gi * cpg + ci] += dg;
                grad_beta.data_mut()[gi * cpg + ci] += db;
            }

            let inv_m = 1.0 / m as f64;
            let dst = &mut grad_x.data_mut()[start..start + m];
            for ci in 0..cpg {
                let g = gamma.data()[gi * cpg + ci];
                for i in 0..hw {
                    let e = ci * hw + i;
                    let xhat = (slab[e] - mean) * invstd;
                    let gh = gout[e] * g;
                    dst[e] = invstd * (gh - s1 * inv_m - xhat * s2 * inv_m);
                }
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}
