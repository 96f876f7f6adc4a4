//! Low-rank adaptation of denoiser weights.
//!
//! Each adapter attaches a delta (alpha/rank)·B·A to one named weight; convs
//! are adapted through the [Cout, Cin·k²] matrix view of their kernel. A is
//! small random, B starts at zero, so a freshly wrapped model computes
//! exactly the base forward. The base stays frozen: only A and B receive
//! gradients, and merging bakes the delta into a plain parameter set.

use crate::denoiser::DenoiserParams;
use crate::error::{invalid, CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::string::String;
use alloc::vec::Vec;

pub const DEFAULT_LORA_RANK: usize = 2;
pub const DEFAULT_LORA_ALPHA: f64 = 4.0;

/// Additive low-rank delta for one named weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// [rank, n] where n = Σ of the non-leading extents of the target.
    pub a: Tensor,
    /// [m, rank] where m = leading extent of the target.
    pub b: Tensor,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// (alpha/rank)·B·A reshaped to the target weight's shape.
    pub fn delta(&self, target_shape: &[usize]) -> Result<Tensor> {
        let (m, r) = self.b.dims2()?;
        let (r2, n) = self.a.dims2()?;
        if r != r2 {
            return Err(invalid("lora_delta", "A/B rank mismatch"));
        }
        let mut flat = Tensor::zeros(&[m, n]);
        matmul_into(flat.data_mut(), self.b.data(), self.a.data(), m, r, n);
        flat.scale(self.scaling());
        flat.reshape(target_shape)
    }

    pub fn trainable_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

fn matmul_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// (m, n) matrix view of a weight: leading extent × the rest.
fn matrix_view(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid("lora_target", "target must have rank >= 2"));
    }
    let m = shape[0];
    let n: usize = shape[1..].iter().product();
    Ok((m, n))
}

/// Frozen base plus trainable adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraModel {
    pub base: DenoiserParams,
    pub adapters: Vec<LoraAdapter>,
}

/// Default adaptation targets: every conv/linear weight of the trunk
/// (names ending in `.w`; the token table and norm parameters stay put).
pub fn default_targets(p: &DenoiserParams) -> Vec<String> {
    p.named()
        .iter()
        .filter(|(name, t)| name.ends_with(".w") && t.shape().len() >= 2)
        .map(|(name, _)| name.clone())
        .collect()
}

/// Attach rank-`rank` adapters to `targets`; A ~ N(0, 0.02²), B = 0.
pub fn wrap_lora(
    p: &DenoiserParams,
    rank: usize,
    alpha: f64,
    targets: &[String],
    rng: &mut Rng,
) -> Result<LoraModel> {
    if rank == 0 {
        return Err(invalid("wrap_lora", "rank must be >= 1"));
    }
    let named = p.named();
    let mut adapters = Vec::with_capacity(targets.len());
    for target in targets {
        let (_, tensor) = named
            .iter()
            .find(|(name, _)| name == target)
            .ok_or_else(|| CoreError::UnknownName { context: "wrap_lora", name: target.clone() })?;
        let (m, n) = matrix_view(tensor.shape())?;
        if rank > m.min(n) {
            return Err(invalid(
                "wrap_lora",
                alloc::format!("rank {rank} exceeds min({m}, {n}) for `{target}`"),
            ));
        }
        let mut a = Tensor::randn(&[rank, n], rng);
        a.scale(0.02);
        adapters.push(LoraAdapter {
            target: target.clone(),
            a,
            b: Tensor::zeros(&[m, rank]),
            alpha,
            rank,
        });
    }
    Ok(LoraModel { base: p.clone(), adapters })
}

impl LoraModel {
    /// Effective parameters W + (alpha/rank)·B·A; the wrapped forward runs
    /// the base network over this materialized set.
    pub fn materialize(&self) -> Result<DenoiserParams> {
        merge_lora(&self.base, &self.adapters)
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters.iter().map(|a| a.trainable_params()).sum()
    }

    /// Trainable fraction relative to the base parameter count.
    pub fn trainable_ratio(&self) -> f64 {
        self.trainable_params() as f64 / self.base.param_count() as f64
    }

    /// Map effective-weight gradients onto (A, B) gradients:
    /// dA = (alpha/r)·Bᵀ·G, dB = (alpha/r)·G·Aᵀ. Base gradients are not
    /// produced at all — the freeze contract.
    pub fn adapter_grads(&self, eff_grads: &DenoiserParams) -> Result<Vec<(Tensor, Tensor)>> {
        let named = eff_grads.named();
        let mut out = Vec::with_capacity(self.adapters.len());
        for ad in &self.adapters {
            let (_, g) = named
                .iter()
                .find(|(name, _)| name == &ad.target)
                .ok_or_else(|| CoreError::UnknownName { context: "adapter_grads", name: ad.target.clone() })?;
            let (m, n) = matrix_view(g.shape())?;
            let r = ad.rank;
            let s = ad.scaling();
            // dA[r,n] = s·Bᵀ[r,m]·G[m,n]
            let mut da = Tensor::zeros(&[r, n]);
            for mi in 0..m {
                for ri in 0..r {
                    let bv = ad.b.data()[mi * r + ri] * s;
                    if bv == 0.0 {
                        continue;
                    }
                    let grow = &g.data()[mi * n..(mi + 1) * n];
                    let arow = &mut da.data_mut()[ri * n..(ri + 1) * n];
                    for j in 0..n {
                        arow[j] += bv * grow[j];
                    }
                }
            }
            // dB[m,r] = s·G[m,n]·Aᵀ[n,r]
            let mut db = Tensor::zeros(&[m, r]);
            for mi in 0..m {
                let grow = &g.data()[mi * n..(mi + 1) * n];
                for ri in 0..r {
                    let arow = &ad.a.data()[ri * n..(ri + 1) * n];
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += grow[j] * arow[j];
                    }
                    db.data_mut()[mi * r + ri] = acc * s;
                }
            }
            out.push((da, db));
        }
        Ok(out)
    }
}

/// W ← W + (alpha/rank)·B·A for every adapter. Merging an already-merged
/// parameter set applies the delta again — callers own that hazard.
pub fn merge_lora(p: &DenoiserParams, adapters: &[LoraAdapter]) -> Result<DenoiserParams> {
    let mut merged = p.clone();
    {
        let mut named = merged.named_mut();
        for ad in adapters {
            let slot = named
                .iter_mut()
                .find(|(name, _)| name == &ad.target)
                .ok_or_else(|| CoreError::UnknownName { context: "merge_lora", name: ad.target.clone() })?;
            let delta = ad.delta(slot.1.shape())?;
            slot.1.add_scaled(&delta, 1.0)?;
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{forward, init_denoiser, DenoiserConfig, TextInput};
    use crate::text;
    use crate::training::{adam_step, AdamState};

    fn small() -> DenoiserParams {
        let cfg = DenoiserConfig { latent_channels: 2, base_width: 8, emb_dim: 16, text_dim: 8, cond_channels: 1 };
        init_denoiser(&cfg, &mut Rng::new(80)).unwrap()
    }

    fn run(p: &DenoiserParams, z: &Tensor) -> Tensor {
        let prompt = text::sequence_ids(&text::tokenize(&["field"]));
        forward(p, z, &[5], &TextInput::Sequences(&[prompt]), &[], false).unwrap().0
    }

    #[test]
    fn zero_b_wrapped_equals_base_bitwise() {
        let p = small();
        let model = wrap_lora(&p, 2, 4.0, &default_targets(&p), &mut Rng::new(81)).unwrap();
        let mut rng = Rng::new(82);
        let z = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let base_out = run(&p, &z);
        let wrapped_out = run(&model.materialize().unwrap(), &z);
        assert_eq!(base_out, wrapped_out);
    }

    #[test]
    fn unknown_target_and_oversized_rank_rejected() {
        let p = small();
        let bad = [String::from("nonexistent.w")];
        assert!(matches!(
            wrap_lora(&p, 2, 4.0, &bad, &mut Rng::new(0)),
            Err(CoreError::UnknownName { .. })
        ));
        let huge = [String::from("head.w")]; // head.w is [2, 8, 3, 3] → min(m,n)=2
        assert!(wrap_lora(&p, 5, 4.0, &huge, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn merged_equals_wrapped() {
        let p = small();
        let mut model = wrap_lora(&p, 2, 4.0, &default_targets(&p), &mut Rng::new(83)).unwrap();
        // give the adapters non-trivial content
        let mut rng = Rng::new(84);
        for ad in &mut model.adapters {
            ad.b = Tensor::randn(ad.b.shape(), &mut rng);
            ad.b.scale(0.05);
        }
        let merged = merge_lora(&model.base, &model.adapters).unwrap();
        for trial in 0..10 {
            let z = Tensor::randn(&[1, 2, 8, 8], &mut rng);
            let a = run(&model.materialize().unwrap(), &z);
            let b = run(&merged, &z);
            assert!(a.max_abs_diff(&b) <= 1e-10, "trial {trial}");
        }
    }

    #[test]
    fn merging_twice_applies_delta_twice() {
        let p = small();
        let mut model = wrap_lora(&p, 1, 1.0, &[String::from("stem.w")], &mut Rng::new(85)).unwrap();
        model.adapters[0].b = Tensor::full(model.adapters[0].b.shape(), 0.5);
        let once = merge_lora(&p, &model.adapters).unwrap();
        let twice = merge_lora(&once, &model.adapters).unwrap();
        let delta = model.adapters[0].delta(p.stem.w.shape()).unwrap();
        for i in 0..delta.numel() {
            let expect = p.stem.w.data()[i] + 2.0 * delta.data()[i];
            assert!((twice.stem.w.data()[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn trainable_ratio_below_ten_percent_in_default_config() {
        let cfg = DenoiserConfig::default();
        let p = init_denoiser(&cfg, &mut Rng::new(86)).unwrap();
        let model = wrap_lora(
            &p,
            DEFAULT_LORA_RANK,
            DEFAULT_LORA_ALPHA,
            &default_targets(&p),
            &mut Rng::new(87),
        )
        .unwrap();
        let ratio = model.trainable_ratio();
        assert!(ratio < 0.10, "trainable ratio {ratio}");
        assert!(model.trainable_params() > 0);
    }

    #[test]
    fn full_rank_adapter_fits_random_delta() {
        // rank = min(m, n): minimize ‖(alpha/r)·B·A − ΔW‖² by Adam
        let (m, n, r) = (6usize, 10usize, 6usize);
        let alpha = r as f64; // scaling 1
        let mut rng = Rng::new(88);
        let delta = Tensor::randn(&[m, n], &mut rng);
        let mut a = Tensor::randn(&[r, n], &mut rng);
        a.scale(0.02);
        let mut b = Tensor::zeros(&[m, r]);
        let mut state = AdamState::new(&[&a, &b]);
        let s = alpha / r as f64;
        for _ in 0..4000 {
            let mut approx = Tensor::zeros(&[m, n]);
            matmul_into(approx.data_mut(), b.data(), a.data(), m, r, n);
            approx.scale(s);
            let mut err = approx.clone();
            err.add_scaled(&delta, -1.0).unwrap();
            // dA = 2s·Bᵀ·E, dB = 2s·E·Aᵀ
            let mut da = Tensor::zeros(&[r, n]);
            let mut db = Tensor::zeros(&[m, r]);
            for mi in 0..m {
                for ri in 0..r {
                    let bv = b.data()[mi * r + ri];
                    for j in 0..n {
                        da.data_mut()[ri * n + j] += 2.0 * s * bv * err.data()[mi * n + j];
                        db.data_mut()[mi * r + ri] += 2.0 * s * err.data()[mi * n + j] * a.data()[ri * n + j];
                    }
                }
            }
            adam_step(&mut [&mut a, &mut b], &[&da, &db], &mut state, 0.02, 0.9, 0.999, 1e-8).unwrap();
        }
        let mut approx = Tensor::zeros(&[m, n]);
        matmul_into(approx.data_mut(), b.data(), a.data(), m, r, n);
        approx.scale(s);
        let num: f64 = approx
            .data()
            .iter()
            .zip(delta.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        let den: f64 = delta.data().iter().map(|v| v * v).sum();
        let rel = (num / den).sqrt();
        assert!(rel < 1e-3, "full-rank fit rel err {rel}");
    }

    #[test]
    fn adapter_training_leaves_base_bit_identical() {
        let p = small();
        let mut model = wrap_lora(&p, 2, 4.0, &default_targets(&p), &mut Rng::new(89)).unwrap();
        let before: Vec<Tensor> = model.base.named().iter().map(|(_, t)| (*t).clone()).collect();
        // fake an effective-weight gradient and take adapter steps
        let mut rng = Rng::new(90);
        let mut eff = p.grads_like();
        for (_, t) in eff.named_mut() {
            *t = Tensor::randn(t.shape(), &mut rng);
        }
        let grads = model.adapter_grads(&eff).unwrap();
        let mut flat_params: Vec<&mut Tensor> = Vec::new();
        for ad in &mut model.adapters {
            flat_params.push(&mut ad.a);
            flat_params.push(&mut ad.b);
        }
        let flat_grads: Vec<&Tensor> = grads.iter().flat_map(|(da, db)| [da, db]).collect();
        let param_refs: Vec<&Tensor> = flat_params.iter().map(|t| &**t).collect();
        let mut state = AdamState::new(&param_refs);
        adam_step(&mut flat_params, &flat_grads, &mut state, 1e-2, 0.9, 0.999, 1e-8).unwrap();
        for ((_, after), before) in model.base.named().iter().zip(before.iter()) {
            assert_eq!(*after, before, "base weights must stay frozen");
        }
    }
}
