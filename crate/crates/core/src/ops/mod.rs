//! Layer primitives with explicit forward and backward functions.
//!
//! Gradients are hand-written per op; model code composes them over a
//! recorded forward sequence instead of a general autodiff graph.
//! Convolution is cross-correlation (no kernel flip), the modern
//! deep-learning convention.

mod act;
mod conv;
mod gradcheck;
mod linear;
mod norm;
mod resize;

pub use act::{sigmoid, sigmoid_backward_from_output, silu, silu_backward};
pub use conv::{conv2d, conv2d_backward};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use linear::{linear, linear_backward};
pub use norm::{group_norm, group_norm_backward};
pub use resize::{box_downsample, interpolate2d, interpolate2d_backward, InterpMode};

/// c[m,n] += a[m,k]·b[k,n]
pub(crate) fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k]·b[n,k]ᵀ (b stored row-major as [n,k])
pub(crate) fn gemm_bt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ·b[m,n] (a stored row-major as [m,k])
pub(crate) fn gemm_at_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let w = arow[p];
            if w == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += w * brow[j];
            }
        }
    }
}
