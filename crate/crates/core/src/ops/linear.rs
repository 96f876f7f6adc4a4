//! Affine map over the last axis.

use crate::error::{shape_mismatch, Result};
use crate::tensor::Tensor;

use super::{gemm_acc, gemm_at_acc, gemm_bt_acc};

/// `input` [B,N] × `weight` [M,N]ᵀ + `bias` [M] → [B,M].
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, n) = input.dims2()?;
    let (m, wn) = weight.dims2()?;
    if wn != n {
        return Err(shape_mismatch("linear input/weight", input.shape(), weight.shape()));
    }
    if bias.shape() != [m] {
        return Err(shape_mismatch("linear weight/bias", weight.shape(), bias.shape()));
    }
    let mut out = Tensor::zeros(&[b, m]);
    gemm_bt_acc(out.data_mut(), input.data(), weight.data(), b, n, m);
    for bi in 0..b {
        let row = &mut out.data_mut()[bi * m..(bi + 1) * m];
        for (v, bv) in row.iter_mut().zip(bias.data()) {
            *v += bv;
        }
    }
    out.ensure_finite("linear")?;
    Ok(out)
}

/// Gradients of `linear` w.r.t. input, weight, and bias.
pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, n) = input.dims2()?;
    let (m, _) = weight.dims2()?;
    if grad_out.shape() != [b, m] {
        return Err(shape_mismatch("linear_backward", grad_out.shape(), &[b, m]));
    }
    let mut grad_input = Tensor::zeros(&[b, n]);
    let mut grad_weight = Tensor::zeros(&[m, n]);
    let mut grad_bias = Tensor::zeros(&[m]);
    gemm_acc(grad_input.data_mut(), grad_out.data(), weight.data(), b, m, n);
    gemm_at_acc(grad_weight.data_mut(), grad_out.data(), input.data(), b, m, n);
    for bi in 0..b {
        for mi in 0..m {
            grad_bias.data_mut()[mi] += grad_out.data()[bi * m + mi];
        }
    }
    Ok((grad_input, grad_weight, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::grad_check;
    use crate::rng::Rng;

    #[test]
    fn identity_weight_returns_input() {
        let input = Tensor::new(&[2, 3], alloc::vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let weight = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let bias = Tensor::zeros(&[3]);
        let out = linear(&input, &weight, &bias).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn hand_sum() {
        let input = Tensor::new(&[1, 2], alloc::vec![2.0, 3.0]).unwrap();
        let weight = Tensor::new(&[1, 2], alloc::vec![1.0, 1.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = linear(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = Rng::new(9);
        let input = Tensor::randn(&[4, 6], &mut rng);
        let weight = Tensor::randn(&[5, 6], &mut rng);
        let bias = Tensor::randn(&[5], &mut rng);
        let out = linear(&input, &weight, &bias).unwrap();
        for bi in 0..4 {
            for mi in 0..5 {
                let mut acc = bias.data()[mi];
                for ni in 0..6 {
                    acc += input.data()[bi * 6 + ni] * weight.data()[mi * 6 + ni];
                }
                assert!((out.data()[bi * 5 + mi] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inner_dim_mismatch_rejected() {
        let input = Tensor::zeros(&[2, 3]);
        let weight = Tensor::zeros(&[4, 5]);
        let bias = Tensor::zeros(&[4]);
        assert!(linear(&input, &weight, &bias).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(10);
        let input = Tensor::randn(&[3, 4], &mut rng);
        let weight = Tensor::randn(&[2, 4], &mut rng);
        let bias = Tensor::randn(&[2], &mut rng);
        let proj = Tensor::randn(&[3, 2], &mut rng);
        let f = |xs: &[Tensor]| {
            let out = linear(&xs[0], &xs[1], &xs[2]).unwrap();
            let loss = out
                .data()
                .iter()
                .zip(proj.data().iter())
                .map(|(a, b)| a * b)
                .sum::<f64>();
            let (gi, gw, gb) = linear_backward(&xs[0], &xs[1], &proj).unwrap();
            (loss, alloc::vec![gi, gw, gb])
        };
        let err = grad_check(&f, &[input, weight, bias], 1e-5);
        assert!(err < 1e-8, "linear grad rel err {err}");
    }
}
