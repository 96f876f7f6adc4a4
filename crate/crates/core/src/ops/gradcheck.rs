//! Central-difference gradient verification.

use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec::Vec;

fn rel_err(analytic: f64, central: f64) -> f64 {
    math::abs(analytic - central) / (math::abs(analytic) + math::abs(central) + 1e-12)
}

/// Compare the analytic gradients returned by `f` against central finite
/// differences over every element of every input.
///
/// `f` evaluates a scalar-valued composition and returns `(value, grads)`
/// with one gradient tensor per input. Returns the max relative error
/// `|analytic − central| / (|analytic| + |central| + 1e-12)`.
pub fn grad_check<F>(f: &F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, grads) = f(inputs);
    let mut worst = 0.0;
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += eps;
            let (fp, _) = f(&plus);
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= eps;
            let (fm, _) = f(&minus);
            let central = (fp - fm) / (2.0 * eps);
            worst = math::maxf(worst, rel_err(grads[ti].data()[ei], central));
        }
    }
    worst
}

/// Like [`grad_check`] but probing at most `max_per_tensor` randomly chosen
/// coordinates of each input; used for whole-network checks where a full
/// sweep would be quadratic in parameter count.
pub fn grad_check_sampled<F>(
    f: &F,
    inputs: &[Tensor],
    eps: f64,
    max_per_tensor: usize,
    rng: &mut Rng,
) -> f64
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, grads) = f(inputs);
    let mut worst = 0.0;
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let probes: Vec<usize> = if n <= max_per_tensor {
            (0..n).collect()
        } else {
            (0..max_per_tensor).map(|_| rng.next_below(n as u64) as usize).collect()
        };
        for ei in probes {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += eps;
            let (fp, _) = f(&plus);
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= eps;
            let (fm, _) = f(&minus);
            let central = (fp - fm) / (2.0 * eps);
            worst = math::maxf(worst, rel_err(grads[ti].data()[ei], central));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_checks_tightly() {
        // f(x) = Σ x², x = [1, 2] → analytic gradient [2, 4]
        let x = Tensor::new(&[2], alloc::vec![1.0, 2.0]).unwrap();
        let f = |xs: &[Tensor]| {
            let v = xs[0].data().iter().map(|a| a * a).sum::<f64>();
            let g = xs[0].map(|a| 2.0 * a);
            (v, alloc::vec![g])
        };
        let (_, grads) = f(&[x.clone()]);
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
        let err = grad_check(&f, &[x], 1e-5);
        assert!(err < 1e-8, "quadratic rel err {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(&[2], alloc::vec![1.0, 2.0]).unwrap();
        let f = |xs: &[Tensor]| {
            let v = xs[0].data().iter().map(|a| a * a).sum::<f64>();
            let g = xs[0].map(|a| 3.0 * a); // deliberately wrong
            (v, alloc::vec![g])
        };
        let err = grad_check(&f, &[x], 1e-5);
        assert!(err > 1e-2, "should flag the broken gradient, got {err}");
    }
}
