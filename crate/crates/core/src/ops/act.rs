//! Pointwise activations.

use crate::error::Result;
use crate::math;
use crate::tensor::Tensor;

/// silu(x) = x·sigmoid(x)
pub fn silu(x: &Tensor) -> Result<Tensor> {
    let out = x.map(|v| v * math::sigmoid(v));
    out.ensure_finite("silu")?;
    Ok(out)
}

pub fn silu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    debug_assert!(x.same_shape(grad_out));
    let mut grad = x.zeros_like();
    for ((g, xi), go) in grad
        .data_mut()
        .iter_mut()
        .zip(x.data().iter())
        .zip(grad_out.data().iter())
    {
        let s = math::sigmoid(*xi);
        *g = go * (s * (1.0 + xi * (1.0 - s)));
    }
    Ok(grad)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let out = x.map(math::sigmoid);
    out.ensure_finite("sigmoid")?;
    Ok(out)
}

/// Sigmoid gradient expressed through the forward output y: y·(1−y)·g.
pub fn sigmoid_backward_from_output(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    debug_assert!(y.same_shape(grad_out));
    let mut grad = y.zeros_like();
    for ((g, yi), go) in grad
        .data_mut()
        .iter_mut()
        .zip(y.data().iter())
        .zip(grad_out.data().iter())
    {
        *g = go * yi * (1.0 - yi);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::grad_check;
    use crate::rng::Rng;

    #[test]
    fn silu_of_zero_is_zero() {
        let x = Tensor::zeros(&[3]);
        let y = silu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn silu_gradient_checks() {
        let mut rng = Rng::new(20);
        let x = Tensor::randn(&[17], &mut rng);
        let proj = Tensor::randn(&[17], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = silu(&xs[0]).unwrap();
            let loss = y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
            let g = silu_backward(&xs[0], &proj).unwrap();
            (loss, alloc::vec![g])
        };
        let err = grad_check(&f, &[x], 1e-5);
        assert!(err < 1e-8, "silu grad rel err {err}");
    }

    #[test]
    fn sigmoid_gradient_checks() {
        let mut rng = Rng::new(21);
        let x = Tensor::randn(&[11], &mut rng);
        let proj = Tensor::randn(&[11], &mut rng);
        let f = |xs: &[Tensor]| {
            let y = sigmoid(&xs[0]).unwrap();
            let loss = y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
            let g = sigmoid_backward_from_output(&y, &proj).unwrap();
            (loss, alloc::vec![g])
        };
        let err = grad_check(&f, &[x], 1e-5);
        assert!(err < 1e-8, "sigmoid grad rel err {err}");
    }
}
