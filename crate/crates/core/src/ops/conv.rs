//! 2-D convolution (cross-correlation) with exact gradients.

use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

use super::{gemm_acc, gemm_at_acc, gemm_bt_acc};

fn out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(invalid(
            "conv2d",
            alloc::format!("kernel {k} larger than padded extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Gather the receptive fields of one image into a [Cin·k², Ho·Wo] matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = &mut cols[((ci * k + u) * k + v) * ho * wo..][..ho * wo];
                for p in 0..ho {
                    let y = (p * stride + u) as isize - padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src_row = &plane[y as usize * w..(y as usize + 1) * w];
                    let dst_row = &mut row[p * wo..(p + 1) * wo];
                    for q in 0..wo {
                        let x = (q * stride + v) as isize - padding as isize;
                        if x >= 0 && x < w as isize {
                            dst_row[q] = src_row[x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back onto an image (adjoint of `im2col`).
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    img: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = &cols[((ci * k + u) * k + v) * ho * wo..][..ho * wo];
                for p in 0..ho {
                    let y = (p * stride + u) as isize - padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src_row = &row[p * wo..(p + 1) * wo];
                    let dst_row = &mut plane[y as usize * w..(y as usize + 1) * w];
                    for q in 0..wo {
                        let x = (q * stride + v) as isize - padding as isize;
                        if x >= 0 && x < w as isize {
                            dst_row[x as usize] += src_row[q];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_args(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, wcin, k, k2) = weight.dims4()?;
    if k != k2 || k % 2 == 0 {
        return Err(invalid(
            "conv2d",
            alloc::format!("kernel must be square with odd extent, got {k}x{k2}"),
        ));
    }
    if wcin != cin {
        return Err(shape_mismatch("conv2d input/weight", input.shape(), weight.shape()));
    }
    if bias.shape() != [cout] {
        return Err(shape_mismatch("conv2d weight/bias", weight.shape(), bias.shape()));
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be >= 1"));
    }
    Ok((b, cin, h, w, cout, k))
}

/// Cross-correlate `input` [B,Cin,H,W] with `weight` [Cout,Cin,k,k] plus bias.
///
/// With stride 1 and padding k/2 (floor) the spatial extent is preserved.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, cin, h, w, cout, k) = check_conv_args(input, weight, bias, stride)?;
    let ho = out_extent(h, k, stride, padding)?;
    let wo = out_extent(w, k, stride, padding)?;
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    let ck2 = cin * k * k;
    for bi in 0..b {
        let img = &input.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
        let cols = im2col(img, cin, h, w, k, stride, padding, ho, wo);
        let out_img = &mut out.data_mut()[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        gemm_acc(out_img, weight.data(), &cols, cout, ck2, ho * wo);
        for o in 0..cout {
            let bv = bias.data()[o];
            for v in &mut out_img[o * ho * wo..(o + 1) * ho * wo] {
                *v += bv;
            }
        }
    }
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input, weight, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, _, k, _) = weight.dims4()?;
    let ho = out_extent(h, k, stride, padding)?;
    let wo = out_extent(w, k, stride, padding)?;
    if grad_out.shape() != [b, cout, ho, wo] {
        return Err(shape_mismatch("conv2d_backward", grad_out.shape(), &[b, cout, ho, wo]));
    }
    let ck2 = cin * k * k;
    let mut grad_input = Tensor::zeros(&[b, cin, h, w]);
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut grad_bias = Tensor::zeros(&[cout]);

    for bi in 0..b {
        let img = &input.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
        let g = &grad_out.data()[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        let cols = im2col(img, cin, h, w, k, stride, padding, ho, wo);
        // dW += G · colsᵀ
        gemm_bt_acc(grad_weight.data_mut(), g, &cols, cout, ho * wo, ck2);
        // dcols = Wᵀ · G, then scatter back to the image
        let mut grad_cols = vec![0.0; ck2 * ho * wo];
        gemm_at_acc(&mut grad_cols, weight.data(), g, cout, ck2, ho * wo);
        let gi = &mut grad_input.data_mut()[bi * cin * h * w..(bi + 1) * cin * h * w];
        col2im_acc(&grad_cols, gi, cin, h, w, k, stride, padding, ho, wo);
        for o in 0..cout {
            grad_bias.data_mut()[o] += g[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
        }
    }
    Ok((grad_input, grad_weight, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct six-loop cross-correlation used as the independence oracle.
    fn conv_oracle(
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let (b, cin, h, w) = input.dims4().unwrap();
        let (cout, _, k, _) = weight.dims4().unwrap();
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, cout, ho, wo]);
        for bi in 0..b {
            for o in 0..cout {
                for p in 0..ho {
                    for q in 0..wo {
                        let mut acc = bias.data()[o];
                        for ci in 0..cin {
                            for u in 0..k {
                                for v in 0..k {
                                    let y = (p * stride + u) as isize - padding as isize;
                                    let x = (q * stride + v) as isize - padding as isize;
                                    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                                        let iv = input.data()
                                            [((bi * cin + ci) * h + y as usize) * w + x as usize];
                                        let wv = weight.data()
                                            [((o * cin + ci) * k + u) * k + v];
                                        acc += iv * wv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + o) * ho + p) * wo + q] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_scaling_kernel_doubles() {
        let input = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let weight = Tensor::new(&[1, 1, 1, 1], alloc::vec![2.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &weight, &bias, 1, 0).unwrap();
        for (o, i) in out.data().iter().zip(input.data().iter()) {
            assert_eq!(*o, 2.0 * i);
        }
    }

    #[test]
    fn zero_weight_gives_constant_bias() {
        let mut rng = Rng::new(1);
        let input = Tensor::randn(&[2, 3, 5, 5], &mut rng);
        let weight = Tensor::zeros(&[4, 3, 3, 3]);
        let bias = Tensor::new(&[4], alloc::vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = conv2d(&input, &weight, &bias, 1, 1).unwrap();
        let (_, _, ho, wo) = out.dims4().unwrap();
        for bi in 0..2 {
            for o in 0..4 {
                for i in 0..ho * wo {
                    assert_eq!(out.data()[(bi * 4 + o) * ho * wo + i], bias.data()[o]);
                }
            }
        }
    }

    #[test]
    fn matches_six_loop_oracle() {
        let mut rng = Rng::new(2);
        let input = Tensor::randn(&[1, 2, 5, 5], &mut rng);
        let weight = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let bias = Tensor::randn(&[3], &mut rng);
        for (stride, padding) in [(1usize, 1usize), (1, 0), (2, 1)] {
            let fast = conv2d(&input, &weight, &bias, stride, padding).unwrap();
            let slow = conv_oracle(&input, &weight, &bias, stride, padding);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn stride1_halfpad_preserves_extent() {
        let mut rng = Rng::new(3);
        let input = Tensor::randn(&[1, 1, 7, 9], &mut rng);
        let weight = Tensor::randn(&[2, 1, 5, 5], &mut rng);
        let bias = Tensor::zeros(&[2]);
        let out = conv2d(&input, &weight, &bias, 1, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 7, 9]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let input = Tensor::zeros(&[1, 2, 4, 4]);
        let weight = Tensor::zeros(&[3, 5, 3, 3]);
        let bias = Tensor::zeros(&[3]);
        let err = conv2d(&input, &weight, &bias, 1, 1).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[3, 5, 3, 3]"), "{msg}");
    }

    #[test]
    fn even_kernel_rejected() {
        let input = Tensor::zeros(&[1, 1, 4, 4]);
        let weight = Tensor::zeros(&[1, 1, 2, 2]);
        let bias = Tensor::zeros(&[1]);
        assert!(conv2d(&input, &weight, &bias, 1, 0).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::ops::grad_check;
        let mut rng = Rng::new(4);
        let input = Tensor::randn(&[2, 2, 5, 5], &mut rng);
        let weight = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let bias = Tensor::randn(&[3], &mut rng);
        let proj = Tensor::randn(&[2, 3, 3, 3], &mut rng); // stride 2, pad 1 output
        let f = |xs: &[Tensor]| {
            let out = conv2d(&xs[0], &xs[1], &xs[2], 2, 1).unwrap();
            let loss = out
                .data()
                .iter()
                .zip(proj.data().iter())
                .map(|(a, b)| a * b)
                .sum::<f64>();
            let (gi, gw, gb) = conv2d_backward(&xs[0], &xs[1], &proj, 2, 1).unwrap();
            (loss, alloc::vec![gi, gw, gb])
        };
        let err = grad_check(&f, &[input, weight, bias], 1e-5);
        assert!(err < 1e-6, "conv2d grad rel err {err}");
    }
}
