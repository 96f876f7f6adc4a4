//! JSON configuration files. Every config carries a `version` field and
//! unknown fields are rejected outright.

use crate::checkpoint::ScheduleJson;
use crate::error::{CliError, Result};
use sdf_core::conditioning::ConditionKind;
use sdf_core::pipeline::{ControlSetting, PipelineConfig, StageConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

fn check_version(version: u32, what: &str) -> Result<()> {
    if version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "{what}: unsupported config version {version} (expected {CONFIG_VERSION})"
        )));
    }
    Ok(())
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = crate::fsutil::read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataGenConfig {
    pub version: u32,
    pub scenes: usize,
    #[serde(default = "default_scene_size")]
    pub scene_size: usize,
    #[serde(default = "default_tile_size")]
    pub tile_size: usize,
    #[serde(default = "default_tile_size")]
    pub stride: usize,
    #[serde(default = "default_looks")]
    pub looks: u32,
    #[serde(default = "default_clip_quantile")]
    pub clip_quantile: f64,
}

fn default_scene_size() -> usize {
    512
}
fn default_tile_size() -> usize {
    64
}
fn default_looks() -> u32 {
    16
}
fn default_clip_quantile() -> f64 {
    0.999
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            version: CONFIG_VERSION,
            scenes: 32,
            scene_size: default_scene_size(),
            tile_size: default_tile_size(),
            stride: default_tile_size(),
            looks: default_looks(),
            clip_quantile: default_clip_quantile(),
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.version, "data-gen")?;
        if self.scenes == 0 {
            return Err(CliError::Config("data-gen: scenes must be >= 1".into()));
        }
        if self.scene_size % self.tile_size != 0 || self.scene_size % 4 != 0 {
            return Err(CliError::Config(
                "data-gen: scene_size must be a multiple of tile_size and of 4".into(),
            ));
        }
        if self.tile_size % 8 != 0 {
            return Err(CliError::Config("data-gen: tile_size must be divisible by 8".into()));
        }
        if self.looks == 0 {
            return Err(CliError::Config("data-gen: looks must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelJson {
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_emb_dim")]
    pub emb_dim: usize,
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
}

fn default_latent_channels() -> usize {
    4
}
fn default_base_width() -> usize {
    16
}
fn default_emb_dim() -> usize {
    64
}
fn default_text_dim() -> usize {
    16
}

impl Default for ModelJson {
    fn default() -> Self {
        ModelJson {
            latent_channels: default_latent_channels(),
            base_width: default_base_width(),
            emb_dim: default_emb_dim(),
            text_dim: default_text_dim(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VaeModelJson {
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    #[serde(default = "default_vae_width")]
    pub base_width: usize,
}

fn default_vae_width() -> usize {
    8
}

impl Default for VaeModelJson {
    fn default() -> Self {
        VaeModelJson { latent_channels: default_latent_channels(), base_width: default_vae_width() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoraJson {
    #[serde(default = "default_lora_rank")]
    pub rank: usize,
    #[serde(default = "default_lora_alpha")]
    pub alpha: f64,
}

fn default_lora_rank() -> usize {
    sdf_core::lora::DEFAULT_LORA_RANK
}
fn default_lora_alpha() -> f64 {
    sdf_core::lora::DEFAULT_LORA_ALPHA
}

impl Default for LoraJson {
    fn default() -> Self {
        LoraJson { rank: default_lora_rank(), alpha: default_lora_alpha() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ControlJson {
    pub kind: String,
    /// where the condition image comes from: "tile" (extract from the SAR
    /// tile itself, matching inference) or "pair" (the clean reflectivity)
    #[serde(default = "default_condition_source")]
    pub condition_source: String,
}

fn default_condition_source() -> String {
    "tile".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    /// vae | denoiser | control | lora
    pub target: String,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tier")]
    pub tier: String,
    /// 0 disables intermediate checkpoints; the final one is always written
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "ScheduleJson::desk_default")]
    pub schedule: ScheduleJson,
    #[serde(default = "default_kl_weight")]
    pub kl_weight: f64,
    #[serde(default)]
    pub model: ModelJson,
    #[serde(default)]
    pub vae_model: VaeModelJson,
    #[serde(default)]
    pub lora: LoraJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlJson>,
    #[serde(default)]
    pub checkpoint_f32: bool,
}

fn default_batch() -> usize {
    8
}
fn default_beta1() -> f64 {
    sdf_core::training::DEFAULT_ADAM_BETA1
}
fn default_beta2() -> f64 {
    sdf_core::training::DEFAULT_ADAM_BETA2
}
fn default_adam_eps() -> f64 {
    sdf_core::training::DEFAULT_ADAM_EPS
}
fn default_tier() -> String {
    "sd40".into()
}
fn default_kl_weight() -> f64 {
    sdf_core::vae::DEFAULT_KL_WEIGHT
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.version, "train")?;
        if !["vae", "denoiser", "control", "lora"].contains(&self.target.as_str()) {
            return Err(CliError::Config(format!("train: unknown target `{}`", self.target)));
        }
        if self.batch_size == 0 {
            return Err(CliError::Config("train: batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(CliError::Config("train: lr must be positive".into()));
        }
        if self.kl_weight < 0.0 {
            return Err(CliError::Config("train: kl_weight must be >= 0".into()));
        }
        if self.target == "control" {
            let ctl = self
                .control
                .as_ref()
                .ok_or_else(|| CliError::Config("train: control target needs a `control` section".into()))?;
            ConditionKind::parse(&ctl.kind)?;
            if !["tile", "pair"].contains(&ctl.condition_source.as_str()) {
                return Err(CliError::Config(format!(
                    "train: unknown condition_source `{}`",
                    ctl.condition_source
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

/// Mirrors the in-memory stage description field for field.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageJson {
    pub scale_factor: usize,
    pub tier: String,
    pub controls: Vec<ControlSettingJson>,
    pub steps: usize,
    #[serde(default = "default_denoise_strength")]
    pub denoise_strength: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Vec<String>>,
}

fn default_denoise_strength() -> f64 {
    sdf_core::pipeline::DEFAULT_DENOISE_STRENGTH
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ControlSettingJson {
    pub kind: String,
    pub strength: f64,
    pub end_percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TierJson {
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<String>,
    /// control kind → control checkpoint path
    #[serde(default)]
    pub controls: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipelineJson {
    pub version: u32,
    pub stages: Vec<StageJson>,
    pub tiers: BTreeMap<String, TierJson>,
    pub vae_checkpoint: String,
}

impl PipelineJson {
    pub fn validate(&self) -> Result<()> {
        check_version(self.version, "pipeline")?;
        if self.stages.is_empty() {
            return Err(CliError::Config("pipeline: need at least one stage".into()));
        }
        for st in &self.stages {
            ConditionKind::parse_all(&st.controls)?;
            if !self.tiers.contains_key(&st.tier) {
                return Err(CliError::Config(format!("pipeline: stage tier `{}` not in tiers", st.tier)));
            }
        }
        Ok(())
    }

    pub fn core_config(&self) -> Result<PipelineConfig> {
        let mut stages = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let mut controls = Vec::with_capacity(st.controls.len());
            for c in &st.controls {
                controls.push(ControlSetting {
                    kind: ConditionKind::parse(&c.kind)?,
                    strength: c.strength,
                    end_percent: c.end_percent,
                });
            }
            stages.push(StageConfig {
                scale_factor: st.scale_factor,
                tier: st.tier.clone(),
                controls,
                steps: st.steps,
                denoise_strength: st.denoise_strength,
                seed: st.seed,
                prompt: st.prompt.clone(),
            });
        }
        let cfg = PipelineConfig { stages };
        cfg.validate()?;
        Ok(cfg)
    }
}

trait ParseAll {
    fn parse_all(settings: &[ControlSettingJson]) -> Result<()>;
}

impl ParseAll for ConditionKind {
    fn parse_all(settings: &[ControlSettingJson]) -> Result<()> {
        for s in settings {
            ConditionKind::parse(&s.kind)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = r#"{"version":1,"scenes":4,"bogus":true}"#;
        assert!(serde_json::from_str::<DataGenConfig>(bad).is_err());
    }

    #[test]
    fn version_is_checked() {
        let cfg = DataGenConfig { version: 99, ..DataGenConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn train_config_minimal_parses_with_defaults() {
        let json = r#"{"version":1,"target":"vae","steps":100,"lr":0.001}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.schedule.t_count, 50);
        assert_eq!(cfg.tier, "sd40");
    }

    #[test]
    fn control_target_requires_section() {
        let json = r#"{"version":1,"target":"control","steps":10,"lr":0.001}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pipeline_json_maps_to_core_config() {
        let json = r#"{
            "version": 1,
            "stages": [
                {"scale_factor": 2, "tier": "sd80", "steps": 20, "denoise_strength": 0.6, "seed": 3,
                 "controls": [{"kind": "canny", "strength": 0.8, "end_percent": 0.7},
                              {"kind": "tile", "strength": 0.8, "end_percent": 0.8}]}
            ],
            "tiers": {"sd80": {"checkpoint": "d.sdfc", "controls": {}}},
            "vae_checkpoint": "v.sdfc"
        }"#;
        let cfg: PipelineJson = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        let core = cfg.core_config().unwrap();
        assert_eq!(core.stages.len(), 1);
        assert_eq!(core.stages[0].controls.len(), 2);
        assert_eq!(core.stages[0].controls[0].kind, ConditionKind::Canny);
    }
}
