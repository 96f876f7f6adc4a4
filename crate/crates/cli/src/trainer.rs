//! Training drivers for the four targets: vae, denoiser, control, lora.
//!
//! Every step draws its batch and per-sample noise from counter-based
//! streams keyed by (seed, step, sample), computes per-sample gradients in
//! parallel, and reduces them in sample order — so the result is bit-equal
//! for any `--threads` value. The optimizer runs single-threaded with
//! global-norm clipping at 1.0.

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{self, LoadedDataset};
use crate::error::{CliError, Result};
use crate::fsutil;
use rayon::prelude::*;
use sdf_core::conditioning::{canny, tile_condition, ConditionKind};
use sdf_core::denoiser::{init_control, init_denoiser, DenoiserConfig, DenoiserParams, TokenSeq};
use sdf_core::diffusion::NoiseSchedule;
use sdf_core::lora::{default_targets, wrap_lora};
use sdf_core::pipeline::{CANNY_HIGH, CANNY_LOW, CANNY_SIGMA, TILE_FACTOR};
use sdf_core::text;
use sdf_core::training::{adam_step, clip_global_norm, diffusion_loss_latents, AdamState, GRAD_CLIP_NORM};
use sdf_core::vae::{encode, init_vae, vae_loss, VaeConfig, VaeParams};
use sdf_core::{Rng, Tensor};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub first_window_mean: f64,
    pub last_window_mean: f64,
}

/// Per-step rng for batch assembly; per-sample streams fork off it.
fn step_rng(seed: u64, step: usize) -> Rng {
    Rng::with_stream(seed, 0x57E9_0000 + step as u64)
}

fn tokenize_caption(caption: &[String]) -> TokenSeq {
    let words: Vec<&str> = caption.iter().map(|s| s.as_str()).collect();
    text::sequence_ids(&text::tokenize(&words))
}

fn metrics_csv(rows: &[(usize, f64, f64)]) -> Vec<u8> {
    let mut out = String::from("step,loss,seconds\n");
    for (step, loss, secs) in rows {
        out.push_str(&format!("{step},{loss},{secs:.3}\n"));
    }
    out.into_bytes()
}

fn window_means(rows: &[(usize, f64, f64)]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let w = rows.len().min(100);
    let first: f64 = rows[..w].iter().map(|r| r.1).sum::<f64>() / w as f64;
    let last: f64 = rows[rows.len() - w..].iter().map(|r| r.1).sum::<f64>() / w as f64;
    (first, last)
}

fn add_named(acc: &mut [(String, &mut Tensor)], item: &[(String, &Tensor)], scale: f64) -> Result<()> {
    for ((_, a), (_, b)) in acc.iter_mut().zip(item.iter()) {
        a.add_scaled(b, scale)?;
    }
    Ok(())
}

fn make_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Run(format!("thread pool: {e}")))
}

/// Entry point used by the train-* and finetune-lora subcommands.
pub fn train(
    cfg: &TrainConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    vae_checkpoint: Option<&Path>,
    base_checkpoint: Option<&Path>,
    seed: u64,
    threads: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = dataset::load_tier(dataset_dir, &cfg.tier)?;
    match cfg.target.as_str() {
        "vae" => train_vae(cfg, &ds, out_dir, seed, threads),
        "denoiser" => {
            let vae_path = vae_checkpoint
                .ok_or_else(|| CliError::Run("train-denoiser needs --vae".into()))?;
            train_denoiser(cfg, &ds, out_dir, vae_path, seed, threads)
        }
        "control" => {
            let vae_path = vae_checkpoint
                .ok_or_else(|| CliError::Run("train-control needs --vae".into()))?;
            let base = base_checkpoint
                .ok_or_else(|| CliError::Run("train-control needs --checkpoint (base denoiser)".into()))?;
            train_control(cfg, &ds, out_dir, vae_path, base, seed, threads)
        }
        "lora" => {
            let vae_path = vae_checkpoint
                .ok_or_else(|| CliError::Run("finetune-lora needs --vae".into()))?;
            let base = base_checkpoint
                .ok_or_else(|| CliError::Run("finetune-lora needs --checkpoint (base denoiser)".into()))?;
            train_lora(cfg, &ds, out_dir, vae_path, base, seed, threads)
        }
        other => Err(CliError::Run(format!("unknown training target `{other}`"))),
    }
}

// ---------------------------------------------------------------------------
// vae
// ---------------------------------------------------------------------------

fn train_vae(
    cfg: &TrainConfig,
    ds: &LoadedDataset,
    out_dir: &Path,
    seed: u64,
    threads: usize,
) -> Result<TrainOutcome> {
    let vcfg = VaeConfig {
        latent_channels: cfg.vae_model.latent_channels,
        base_width: cfg.vae_model.base_width,
    };
    let mut params = init_vae(&vcfg, &mut Rng::with_stream(seed, 1))?;
    let mut adam = {
        let named = params.named();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };
    let pool = make_pool(threads)?;
    let n = ds.tiles.len();
    let start = Instant::now();
    let mut rows: Vec<(usize, f64, f64)> = Vec::with_capacity(cfg.steps);
    let mut artifacts = Vec::new();

    for step in 0..cfg.steps {
        let mut rng = step_rng(seed, step);
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| rng.next_below(n as u64) as usize).collect();
        let results: Vec<Result<(f64, VaeParams)>> = pool.install(|| {
            indices
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let mut sample_rng = rng.fork(k as u64);
                    let (report, grads) = vae_loss(&params, &ds.tiles[idx], &mut sample_rng, cfg.kl_weight)?;
                    Ok((report.total, grads))
                })
                .collect()
        });
        let mut loss_sum = 0.0;
        let mut acc = params.grads_like();
        let inv_b = 1.0 / cfg.batch_size as f64;
        for r in results {
            let (loss, grads) = r?;
            loss_sum += loss * inv_b;
            add_named(&mut acc.named_mut(), &grads.named(), inv_b)?;
        }
        {
            let mut named = acc.named_mut();
            let mut refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            clip_global_norm(&mut refs, GRAD_CLIP_NORM);
        }
        apply_adam_vae(&mut params, &acc, &mut adam, cfg)?;
        rows.push((step + 1, loss_sum, start.elapsed().as_secs_f64()));
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            let path = out_dir.join(format!("vae_{:06}.sdfc", step + 1));
            checkpoint::save_vae(&path, &params, 1.0, cfg.checkpoint_f32)?;
            artifacts.push(path);
        }
    }

    // latent scaling factor: 1/std over deterministic encodings of (a subset
    // of) the training set, stored in the final checkpoint header
    let probe = n.min(512);
    let latents: Vec<Tensor> = pool.install(|| {
        (0..probe)
            .into_par_iter()
            .map(|i| encode(&params, &ds.tiles[i], &mut Rng::new(0), false).unwrap())
            .collect()
    });
    let mut sq = 0.0;
    let mut count = 0usize;
    for z in &latents {
        for v in z.data() {
            sq += v * v;
        }
        count += z.numel();
    }
    let std = (sq / count.max(1) as f64).sqrt();
    let latent_scale = if std > 1e-9 { 1.0 / std } else { 1.0 };

    let final_path = out_dir.join("vae_final.sdfc");
    checkpoint::save_vae(&final_path, &params, latent_scale, cfg.checkpoint_f32)?;
    artifacts.push(final_path.clone());
    let metrics_path = out_dir.join("metrics.csv");
    fsutil::write_atomic(&metrics_path, &metrics_csv(&rows))?;
    artifacts.push(metrics_path.clone());
    let (first, last) = window_means(&rows);
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        metrics_path,
        artifacts,
        first_window_mean: first,
        last_window_mean: last,
    })
}

fn apply_adam_vae(params: &mut VaeParams, grads: &VaeParams, adam: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let grads_named = grads.named();
    let grad_refs: Vec<&Tensor> = grads_named.iter().map(|(_, t)| *t).collect();
    let mut named = params.named_mut();
    let mut param_refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
    adam_step(&mut param_refs, &grad_refs, adam, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

fn encode_all(
    pool: &rayon::ThreadPool,
    vae: &VaeParams,
    latent_scale: f64,
    tiles: &[Tensor],
) -> Result<Vec<Tensor>> {
    let out: Vec<Result<Tensor>> = pool.install(|| {
        tiles
            .par_iter()
            .map(|t| {
                let mut z = encode(vae, t, &mut Rng::new(0), false)?;
                z.scale(latent_scale);
                Ok(z)
            })
            .collect()
    });
    out.into_iter().collect()
}

fn denoiser_config(cfg: &TrainConfig) -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: cfg.model.latent_channels,
        base_width: cfg.model.base_width,
        emb_dim: cfg.model.emb_dim,
        text_dim: cfg.model.text_dim,
        cond_channels: 1,
    }
}

struct LatentSet {
    latents: Vec<Tensor>,
    prompts: Vec<TokenSeq>,
}

fn prepare_latents(
    pool: &rayon::ThreadPool,
    cfg: &TrainConfig,
    ds: &LoadedDataset,
    vae_path: &Path,
) -> Result<(VaeParams, f64, LatentSet)> {
    let (vae, latent_scale) = checkpoint::load_vae(vae_path)?;
    if vae.config.latent_channels != cfg.model.latent_channels {
        return Err(CliError::Run(format!(
            "latent channel mismatch: vae has {}, model config wants {}",
            vae.config.latent_channels, cfg.model.latent_channels
        )));
    }
    let latents = encode_all(pool, &vae, latent_scale, &ds.tiles)?;
    let prompts: Vec<TokenSeq> = ds.captions.iter().map(|c| tokenize_caption(c)).collect();
    Ok((vae, latent_scale, LatentSet { latents, prompts }))
}

fn train_denoiser(
    cfg: &TrainConfig,
    ds: &LoadedDataset,
    out_dir: &Path,
    vae_path: &Path,
    seed: u64,
    threads: usize,
) -> Result<TrainOutcome> {
    let pool = make_pool(threads)?;
    let (_vae, _scale, set) = prepare_latents(&pool, cfg, ds, vae_path)?;
    let schedule = cfg.schedule.schedule()?;
    let mut params = init_denoiser(&denoiser_config(cfg), &mut Rng::with_stream(seed, 2))?;
    let mut adam = {
        let named = params.named();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };
    let n = set.latents.len();
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut artifacts = Vec::new();

    for step in 0..cfg.steps {
        let mut rng = step_rng(seed, step);
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| rng.next_below(n as u64) as usize).collect();
        let results: Vec<Result<(f64, DenoiserParams)>> = pool.install(|| {
            indices
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let mut sample_rng = rng.fork(k as u64);
                    let (report, grads, _) = diffusion_loss_latents(
                        &params,
                        None,
                        &set.latents[idx],
                        &set.prompts[idx..=idx],
                        &schedule,
                        &mut sample_rng,
                    )?;
                    Ok((report.loss, grads))
                })
                .collect()
        });
        let mut loss_sum = 0.0;
        let mut acc = params.grads_like();
        let inv_b = 1.0 / cfg.batch_size as f64;
        for r in results {
            let (loss, grads) = r?;
            loss_sum += loss * inv_b;
            add_named(&mut acc.named_mut(), &grads.named(), inv_b)?;
        }
        {
            let mut named = acc.named_mut();
            let mut refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            clip_global_norm(&mut refs, GRAD_CLIP_NORM);
        }
        apply_adam_denoiser(&mut params, &acc, &mut adam, cfg)?;
        rows.push((step + 1, loss_sum, start.elapsed().as_secs_f64()));
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            let path = out_dir.join(format!("denoiser_{:06}.sdfc", step + 1));
            checkpoint::save_denoiser(&path, &params, &cfg.schedule, cfg.checkpoint_f32)?;
            artifacts.push(path);
        }
    }

    let final_path = out_dir.join("denoiser_final.sdfc");
    checkpoint::save_denoiser(&final_path, &params, &cfg.schedule, cfg.checkpoint_f32)?;
    artifacts.push(final_path.clone());
    let metrics_path = out_dir.join("metrics.csv");
    fsutil::write_atomic(&metrics_path, &metrics_csv(&rows))?;
    artifacts.push(metrics_path.clone());
    let (first, last) = window_means(&rows);
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        metrics_path,
        artifacts,
        first_window_mean: first,
        last_window_mean: last,
    })
}

fn apply_adam_denoiser(
    params: &mut DenoiserParams,
    grads: &DenoiserParams,
    adam: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let grads_named = grads.named();
    let grad_refs: Vec<&Tensor> = grads_named.iter().map(|(_, t)| *t).collect();
    let mut named = params.named_mut();
    let mut param_refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
    adam_step(&mut param_refs, &grad_refs, adam, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// control branch
// ---------------------------------------------------------------------------

fn extract_conditions(
    pool: &rayon::ThreadPool,
    kind: ConditionKind,
    sources: &[Tensor],
) -> Result<Vec<Tensor>> {
    let out: Vec<Result<Tensor>> = pool.install(|| {
        sources
            .par_iter()
            .map(|img| {
                let map = match kind {
                    ConditionKind::Canny => canny(img, CANNY_SIGMA, CANNY_LOW, CANNY_HIGH)?,
                    ConditionKind::Tile => tile_condition(img, TILE_FACTOR)?,
                };
                Ok(map.image)
            })
            .collect()
    });
    out.into_iter().collect()
}

fn train_control(
    cfg: &TrainConfig,
    ds: &LoadedDataset,
    out_dir: &Path,
    vae_path: &Path,
    base_path: &Path,
    seed: u64,
    threads: usize,
) -> Result<TrainOutcome> {
    let pool = make_pool(threads)?;
    let ctl_cfg = cfg.control.as_ref().expect("validated");
    let kind = ConditionKind::parse(&ctl_cfg.kind)?;
    let (trunk, schedule_json) = checkpoint::load_denoiser(base_path)?;
    let schedule: NoiseSchedule = schedule_json.schedule()?;
    let (vae, latent_scale) = checkpoint::load_vae(vae_path)?;
    if vae.config.latent_channels != trunk.config.latent_channels {
        return Err(CliError::Run("vae/denoiser latent channel mismatch".into()));
    }
    let latents = encode_all(&pool, &vae, latent_scale, &ds.tiles)?;
    let prompts: Vec<TokenSeq> = ds.captions.iter().map(|c| tokenize_caption(c)).collect();
    let cond_src = if ctl_cfg.condition_source == "pair" { &ds.pairs } else { &ds.tiles };
    let conds = extract_conditions(&pool, kind, cond_src)?;

    let trunk_before: Vec<Tensor> = trunk.named().iter().map(|(_, t)| (*t).clone()).collect();
    let mut branch = init_control(&trunk, &mut Rng::with_stream(seed, 3));
    let mut adam = {
        let named = branch.named();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };
    let n = latents.len();
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut artifacts = Vec::new();
    let base_hash = fsutil::sha256_hex(&fsutil::read_bytes(base_path)?);

    for step in 0..cfg.steps {
        let mut rng = step_rng(seed, step);
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| rng.next_below(n as u64) as usize).collect();
        let results: Vec<Result<(f64, sdf_core::denoiser::ControlBranch)>> = pool.install(|| {
            indices
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let mut sample_rng = rng.fork(k as u64);
                    let (report, _trunk_grads, branch_grads) = diffusion_loss_latents(
                        &trunk,
                        Some((&branch, &conds[idx])),
                        &latents[idx],
                        &prompts[idx..=idx],
                        &schedule,
                        &mut sample_rng,
                    )?;
                    Ok((report.loss, branch_grads.expect("control grads present")))
                })
                .collect()
        });
        let mut loss_sum = 0.0;
        let mut acc = branch.grads_like();
        let inv_b = 1.0 / cfg.batch_size as f64;
        for r in results {
            let (loss, grads) = r?;
            loss_sum += loss * inv_b;
            add_named(&mut acc.named_mut(), &grads.named(), inv_b)?;
        }
        {
            let mut named = acc.named_mut();
            let mut refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            clip_global_norm(&mut refs, GRAD_CLIP_NORM);
        }
        {
            let grads_named = acc.named();
            let grad_refs: Vec<&Tensor> = grads_named.iter().map(|(_, t)| *t).collect();
            let mut named = branch.named_mut();
            let mut param_refs: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            adam_step(&mut param_refs, &grad_refs, &mut adam, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)?;
        }
        rows.push((step + 1, loss_sum, start.elapsed().as_secs_f64()));
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            let path = out_dir.join(format!("control_{:06}.sdfc", step + 1));
            checkpoint::save_control(&path, &branch, kind.name(), &trunk.config, &base_hash, cfg.checkpoint_f32)?;
            artifacts.push(path);
        }
    }

    // freeze contract: the trunk must be bit-identical after training
    for ((name, after), before) in trunk.named().iter().zip(trunk_before.iter()) {
        if *after != before {
            return Err(CliError::Run(format!("frozen trunk tensor `{name}` changed during control training")));
        }
    }

    let final_path = out_dir.join("control_final.sdfc");
    checkpoint::save_control(&final_path, &branch, kind.name(), &trunk.config, &base_hash, cfg.checkpoint_f32)?;
    artifacts.push(final_path.clone());
    let metrics_path = out_dir.join("metrics.csv");
    fsutil::write_atomic(&metrics_path, &metrics_csv(&rows))?;
    artifacts.push(metrics_path.clone());
    let (first, last) = window_means(&rows);
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        metrics_path,
        artifacts,
        first_window_mean: first,
        last_window_mean: last,
    })
}

// ---------------------------------------------------------------------------
// lora
// ---------------------------------------------------------------------------

fn train_lora(
    cfg: &TrainConfig,
    ds: &LoadedDataset,
    out_dir: &Path,
    vae_path: &Path,
    base_path: &Path,
    seed: u64,
    threads: usize,
) -> Result<TrainOutcome> {
    let pool = make_pool(threads)?;
    let (base, schedule_json) = checkpoint::load_denoiser(base_path)?;
    let schedule = schedule_json.schedule()?;
    let (vae, latent_scale) = checkpoint::load_vae(vae_path)?;
    if vae.config.latent_channels != base.config.latent_channels {
        return Err(CliError::Run("vae/denoiser latent channel mismatch".into()));
    }
    let latents = encode_all(&pool, &vae, latent_scale, &ds.tiles)?;
    let prompts: Vec<TokenSeq> = ds.captions.iter().map(|c| tokenize_caption(c)).collect();

    let targets = default_targets(&base);
    let mut model = wrap_lora(&base, cfg.lora.rank, cfg.lora.alpha, &targets, &mut Rng::with_stream(seed, 4))?;
    let base_before: Vec<Tensor> = model.base.named().iter().map(|(_, t)| (*t).clone()).collect();
    let mut adam = {
        let refs: Vec<&Tensor> = model.adapters.iter().flat_map(|a| [&a.a, &a.b]).collect();
        AdamState::new(&refs)
    };
    let n = latents.len();
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut artifacts = Vec::new();
    let base_hash = fsutil::sha256_hex(&fsutil::read_bytes(base_path)?);

    for step in 0..cfg.steps {
        let effective = model.materialize()?;
        let mut rng = step_rng(seed, step);
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| rng.next_below(n as u64) as usize).collect();
        let results: Vec<Result<(f64, DenoiserParams)>> = pool.install(|| {
            indices
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let mut sample_rng = rng.fork(k as u64);
                    let (report, grads, _) = diffusion_loss_latents(
                        &effective,
                        None,
                        &latents[idx],
                        &prompts[idx..=idx],
                        &schedule,
                        &mut sample_rng,
                    )?;
                    Ok((report.loss, grads))
                })
                .collect()
        });
        let mut loss_sum = 0.0;
        let mut acc = effective.grads_like();
        let inv_b = 1.0 / cfg.batch_size as f64;
        for r in results {
            let (loss, grads) = r?;
            loss_sum += loss * inv_b;
            add_named(&mut acc.named_mut(), &grads.named(), inv_b)?;
        }
        // effective-weight grads → adapter grads; the base never sees an update
        let adapter_grads = model.adapter_grads(&acc)?;
        let mut flat_grads: Vec<Tensor> = Vec::with_capacity(adapter_grads.len() * 2);
        for (da, db) in adapter_grads {
            flat_grads.push(da);
            flat_grads.push(db);
        }
        {
            let mut refs: Vec<&mut Tensor> = flat_grads.iter_mut().collect();
            clip_global_norm(&mut refs, GRAD_CLIP_NORM);
        }
        {
            let grad_refs: Vec<&Tensor> = flat_grads.iter().collect();
            let mut param_refs: Vec<&mut Tensor> =
                model.adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect();
            adam_step(&mut param_refs, &grad_refs, &mut adam, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)?;
        }
        rows.push((step + 1, loss_sum, start.elapsed().as_secs_f64()));
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            let path = out_dir.join(format!("lora_{:06}.sdfc", step + 1));
            checkpoint::save_lora(&path, &model.adapters, &base_hash, cfg.checkpoint_f32)?;
            artifacts.push(path);
        }
    }

    for ((name, after), before) in model.base.named().iter().zip(base_before.iter()) {
        if *after != before {
            return Err(CliError::Run(format!("frozen base tensor `{name}` changed during LoRA training")));
        }
    }

    let final_path = out_dir.join("lora_final.sdfc");
    checkpoint::save_lora(&final_path, &model.adapters, &base_hash, cfg.checkpoint_f32)?;
    artifacts.push(final_path.clone());
    let metrics_path = out_dir.join("metrics.csv");
    fsutil::write_atomic(&metrics_path, &metrics_csv(&rows))?;
    artifacts.push(metrics_path.clone());
    let (first, last) = window_means(&rows);
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        metrics_path,
        artifacts,
        first_window_mean: first,
        last_window_mean: last,
    })
}
