//! Small statistics toolbox used by evaluation code and acceptance checks.

use crate::error::{invalid, Result};
use crate::math;
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// 99th-percentile standard normal quantile (for 1%-significance bounds).
pub const Z_99: f64 = 2.3263478740408408;

pub fn mean_std(data: &[f64]) -> (f64, f64) {
    if data.is_empty() {
        return (0.0, 0.0);
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, math::sqrt(var))
}

/// Peak signal-to-noise ratio for images in [0, 1].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(invalid("psnr", "shape mismatch"));
    }
    let n = a.numel() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * math::log10(1.0 / mse))
}

/// Per-position mean and standard deviation over a stack of same-shaped
/// images; returns two tensors of the common shape.
pub fn per_pixel_mean_std(stack: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let first = stack
        .first()
        .ok_or_else(|| invalid("per_pixel_mean_std", "empty stack"))?;
    let n = stack.len() as f64;
    let mut mean = first.zeros_like();
    for img in stack {
        if !img.same_shape(first) {
            return Err(invalid("per_pixel_mean_std", "inconsistent shapes in stack"));
        }
        mean.add_scaled(img, 1.0 / n)?;
    }
    let mut var = first.zeros_like();
    for img in stack {
        for ((v, x), m) in var.data_mut().iter_mut().zip(img.data()).zip(mean.data()) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let std = var.map(math::sqrt);
    Ok((mean, std))
}

/// Relative L1 distance Σ|a−b| / Σ|b| between two maps.
pub fn rel_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(invalid("rel_l1", "shape mismatch"));
    }
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| math::abs(x - y)).sum();
    let den: f64 = b.data().iter().map(|v| math::abs(*v)).sum();
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(num / den)
}

/// Two-sided Kolmogorov–Smirnov statistic against Exp(mean) with a known
/// mean (no parameters estimated from the sample).
pub fn ks_statistic_exponential(samples: &[f64], mean: f64) -> Result<f64> {
    if samples.is_empty() || mean <= 0.0 {
        return Err(invalid("ks_exponential", "need samples and positive mean"));
    }
    let mut xs: Vec<f64> = samples.iter().map(|v| v / mean).collect();
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let cdf = 1.0 - math::exp(-x);
        let lo = cdf - i as f64 / n;
        let hi = (i + 1) as f64 / n - cdf;
        d = math::maxf(d, math::maxf(lo, hi));
    }
    Ok(d)
}

/// Asymptotic KS critical value c(α)/√n with c(α) = √(−ln(α/2)/2).
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    math::sqrt(-math::ln(alpha / 2.0) / 2.0) / math::sqrt(n as f64)
}

/// Wilson–Hilferty approximation of the χ² quantile for `dof` degrees of
/// freedom at the upper-tail z-score `z` (e.g. [`Z_99`] for 1%).
pub fn chi2_critical(dof: usize, z: f64) -> f64 {
    let k = dof as f64;
    let a = 2.0 / (9.0 * k);
    let base = 1.0 - a + z * math::sqrt(a);
    k * base * base * base
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = Tensor::full(&[4, 4], 0.5);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn psnr_known_value() {
        // constant offset 0.1 → MSE 0.01 → 20 dB
        let a = Tensor::full(&[8], 0.5);
        let b = Tensor::full(&[8], 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ks_accepts_true_exponential() {
        let mut rng = Rng::new(70);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.next_exp()).collect();
        let d = ks_statistic_exponential(&xs, 1.0).unwrap();
        assert!(d < ks_critical(xs.len(), 0.01), "D = {d}");
    }

    #[test]
    fn ks_rejects_wrong_distribution() {
        let mut rng = Rng::new(71);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.next_f64()).collect(); // uniform, not exp
        let d = ks_statistic_exponential(&xs, 0.5).unwrap();
        assert!(d > ks_critical(xs.len(), 0.01) * 5.0, "D = {d}");
    }

    #[test]
    fn chi2_critical_matches_tables() {
        // χ²₀.₉₉ for 49 dof ≈ 74.92
        let c = chi2_critical(49, Z_99);
        assert!((c - 74.92).abs() < 0.2, "{c}");
    }

    #[test]
    fn per_pixel_maps() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 3.0);
        let (mean, std) = per_pixel_mean_std(&[a, b]).unwrap();
        for v in mean.data() {
            assert_eq!(*v, 2.0);
        }
        for v in std.data() {
            assert_eq!(*v, 1.0);
        }
    }
}
