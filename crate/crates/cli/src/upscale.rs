//! File-level pipeline runner: load checkpoints into a registry, execute
//! the staged upscaling, and write outputs plus optional intermediates.

use crate::checkpoint;
use crate::config::PipelineJson;
use crate::error::{CliError, Result};
use crate::fsutil;
use crate::pgm;
use crate::pngout;
use sdf_core::conditioning::ConditionKind;
use sdf_core::lora::merge_lora;
use sdf_core::pipeline::{run_pipeline, Registry, TierModel};
use std::path::{Path, PathBuf};

fn load_registry(json: &PipelineJson, config_dir: &Path) -> Result<Registry> {
    let resolve = |p: &str| {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            config_dir.join(path)
        }
    };

    let (vae, latent_scale) = checkpoint::load_vae(&resolve(&json.vae_checkpoint))?;
    let mut tiers = Vec::new();
    let mut schedule_json = None;
    for (tag, tier) in &json.tiers {
        let ckpt_path = resolve(&tier.checkpoint);
        let (mut params, sched) = checkpoint::load_denoiser(&ckpt_path)?;
        match &schedule_json {
            None => schedule_json = Some(sched),
            Some(existing) if *existing == sched => {}
            Some(_) => {
                return Err(CliError::Config(format!(
                    "tier `{tag}`: schedule disagrees with the other tiers"
                )))
            }
        }
        if let Some(lora_path) = &tier.lora {
            let lora_path = resolve(lora_path);
            let (adapters, base_hash) = checkpoint::load_lora(&lora_path)?;
            if !base_hash.is_empty() {
                let actual = fsutil::sha256_hex(&fsutil::read_bytes(&ckpt_path)?);
                if actual != base_hash {
                    return Err(CliError::Config(format!(
                        "tier `{tag}`: LoRA adapter was trained against a different base checkpoint"
                    )));
                }
            }
            params = merge_lora(&params, &adapters)?;
        }
        let mut controls = Vec::new();
        for (kind_name, path) in &tier.controls {
            let kind = ConditionKind::parse(kind_name)?;
            let (branch, stored_kind, branch_cfg) = checkpoint::load_control(&resolve(path))?;
            if stored_kind != *kind_name {
                return Err(CliError::Config(format!(
                    "tier `{tag}`: control checkpoint is `{stored_kind}`, expected `{kind_name}`"
                )));
            }
            if branch_cfg != params.config {
                return Err(CliError::Config(format!(
                    "tier `{tag}`: control branch config does not match the denoiser"
                )));
            }
            controls.push((kind, branch));
        }
        tiers.push((tag.clone(), TierModel { denoiser: params, controls }));
    }
    let schedule_json = schedule_json.ok_or_else(|| CliError::Config("pipeline: no tiers".into()))?;
    Ok(Registry {
        tiers,
        vae,
        latent_scale,
        schedule: schedule_json.schedule()?,
        variance_mode: schedule_json.variance()?,
    })
}

fn write_image(path: &Path, img: &sdf_core::Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => pngout::write_png_gray(path, img, true),
        _ => pgm::write_pgm(path, img, true),
    }
}

/// Execute `upscale --config … --input … --output …`; returns the artifact
/// paths written.
pub fn run(
    config_path: &Path,
    input_path: &Path,
    output_path: &Path,
    dump_dir: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let json: PipelineJson = crate::config::load_json(config_path)?;
    json.validate()?;
    let core_cfg = json.core_config()?;
    let config_dir = config_path.parent().unwrap_or(Path::new("."));
    let registry = load_registry(&json, config_dir)?;

    let input = pgm::read_pgm(input_path)?;
    let (output, stages) = run_pipeline(&input, &core_cfg, &registry)?;

    let mut artifacts = Vec::new();
    write_image(output_path, &output)?;
    artifacts.push(output_path.to_path_buf());

    if let Some(dir) = dump_dir {
        for (i, art) in stages.iter().enumerate() {
            let up = dir.join(format!("stage{i}_input_upscaled.pgm"));
            pgm::write_pgm(&up, &art.upscaled_input, true)?;
            artifacts.push(up);
            for cond in &art.conditions {
                let p = dir.join(format!("stage{i}_cond_{}.pgm", cond.kind.name()));
                pgm::write_pgm(&p, &cond.image, true)?;
                artifacts.push(p);
            }
            let out = dir.join(format!("stage{i}_output.pgm"));
            pgm::write_pgm(&out, &art.output, true)?;
            artifacts.push(out);
        }
        let counts: Vec<Vec<usize>> = stages.iter().map(|a| a.control_steps.clone()).collect();
        let summary = serde_json::to_vec_pretty(&counts).map_err(|e| CliError::Run(e.to_string()))?;
        let p = dir.join("control_steps.json");
        fsutil::write_atomic(&p, &summary)?;
        artifacts.push(p);
    }
    Ok(artifacts)
}
