//! Shared checkpoint container: a JSON config header plus a named-tensor
//! table of `TNSR` records with a name → offset manifest.
//!
//! Layout (little-endian): `SDFC` magic, u32 format version, u64 header
//! length + header JSON, u64 entry count, then per entry name length/bytes
//! and the absolute offset of its `TNSR` record; records follow back to
//! back. Tensors may be stored as f32 for compactness; they always load
//! back as f64.

use crate::error::{CliError, Result};
use crate::fsutil;
use sdf_core::denoiser::{init_control, init_denoiser, ControlBranch, DenoiserConfig, DenoiserParams};
use sdf_core::diffusion::{linear_schedule, NoiseSchedule, VarianceMode};
use sdf_core::lora::LoraAdapter;
use sdf_core::tensor::codec::{self, DType};
use sdf_core::vae::{init_vae, VaeConfig, VaeParams};
use sdf_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SDFC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleJson {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance_mode: String,
}

impl ScheduleJson {
    pub fn desk_default() -> Self {
        ScheduleJson {
            t_count: sdf_core::diffusion::DEFAULT_T_DESK,
            beta_start: sdf_core::diffusion::DEFAULT_BETA_START,
            beta_end: sdf_core::diffusion::DEFAULT_BETA_END,
            variance_mode: "posterior".into(),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(linear_schedule(self.t_count, self.beta_start, self.beta_end)?)
    }

    pub fn variance(&self) -> Result<VarianceMode> {
        Ok(VarianceMode::parse(&self.variance_mode)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfigJson {
    pub latent_channels: usize,
    pub base_width: usize,
    pub emb_dim: usize,
    pub text_dim: usize,
    pub cond_channels: usize,
}

impl From<&DenoiserConfig> for DenoiserConfigJson {
    fn from(c: &DenoiserConfig) -> Self {
        DenoiserConfigJson {
            latent_channels: c.latent_channels,
            base_width: c.base_width,
            emb_dim: c.emb_dim,
            text_dim: c.text_dim,
            cond_channels: c.cond_channels,
        }
    }
}

impl DenoiserConfigJson {
    pub fn config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: self.latent_channels,
            base_width: self.base_width,
            emb_dim: self.emb_dim,
            text_dim: self.text_dim,
            cond_channels: self.cond_channels,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VaeConfigJson {
    pub latent_channels: usize,
    pub base_width: usize,
}

impl VaeConfigJson {
    pub fn config(&self) -> VaeConfig {
        VaeConfig { latent_channels: self.latent_channels, base_width: self.base_width }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoraHeaderJson {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

/// JSON header carried by every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<DenoiserConfigJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae: Option<VaeConfigJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraHeaderJson>,
}

impl CheckpointHeader {
    fn new(kind: &str) -> Self {
        CheckpointHeader {
            version: FORMAT_VERSION,
            kind: kind.into(),
            denoiser: None,
            vae: None,
            schedule: None,
            latent_scale: None,
            control_kind: None,
            base_hash: None,
            lora: None,
        }
    }
}

pub fn write_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    tensors: &[(String, &Tensor)],
    f32_storage: bool,
) -> Result<()> {
    let header_json = serde_json::to_vec(header).map_err(|e| CliError::Config(e.to_string()))?;
    let dtype = if f32_storage { DType::F32 } else { DType::F64 };

    let records: Vec<Vec<u8>> = tensors.iter().map(|(_, t)| codec::encode(t, dtype)).collect();
    let mut manifest_len = 8; // entry count
    for (name, _) in tensors {
        manifest_len += 8 + name.len() + 8;
    }
    let data_start = 4 + 4 + 8 + header_json.len() + manifest_len;

    let mut out = Vec::with_capacity(data_start + records.iter().map(|r| r.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    let mut offset = data_start as u64;
    for ((name, _), rec) in tensors.iter().zip(records.iter()) {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += rec.len() as u64;
    }
    for rec in &records {
        out.extend_from_slice(rec);
    }
    fsutil::write_atomic(path, &out)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, Tensor>)> {
    let bytes = fsutil::read_bytes(path)?;
    let bad = |d: &str| CliError::format(path, d.to_string());
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut pos = 16;
    if bytes.len() < pos + header_len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[pos..pos + header_len])
        .map_err(|e| CliError::format(path, format!("header JSON: {e}")))?;
    pos += header_len;
    let count = u64::from_le_bytes(
        bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated manifest"))?.try_into().unwrap(),
    ) as usize;
    pos += 8;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u64::from_le_bytes(
            bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated manifest"))?.try_into().unwrap(),
        ) as usize;
        pos += 8;
        let name = std::str::from_utf8(
            bytes.get(pos..pos + name_len).ok_or_else(|| bad("truncated name"))?,
        )
        .map_err(|_| bad("name not UTF-8"))?
        .to_string();
        pos += name_len;
        let offset = u64::from_le_bytes(
            bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated manifest"))?.try_into().unwrap(),
        ) as usize;
        pos += 8;
        entries.push((name, offset));
    }
    let mut table = BTreeMap::new();
    for (name, offset) in entries {
        let slice = bytes.get(offset..).ok_or_else(|| bad("offset out of range"))?;
        let (tensor, _) = codec::decode(slice)?;
        table.insert(name, tensor);
    }
    Ok((header, table))
}

/// Copy every named tensor from `table`, requiring exact name and shape
/// agreement in both directions.
fn fill_named(
    path: &Path,
    mut slots: Vec<(String, &mut Tensor)>,
    table: &BTreeMap<String, Tensor>,
) -> Result<()> {
    if slots.len() != table.len() {
        return Err(CliError::format(
            path,
            format!("checkpoint has {} tensors, model wants {}", table.len(), slots.len()),
        ));
    }
    for (name, slot) in slots.iter_mut() {
        let src = table
            .get(name)
            .ok_or_else(|| CliError::format(path, format!("missing tensor `{name}`")))?;
        if src.shape() != slot.shape() {
            return Err(CliError::format(
                path,
                format!("tensor `{name}`: shape {:?} vs expected {:?}", src.shape(), slot.shape()),
            ));
        }
        **slot = src.clone();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// typed save/load
// ---------------------------------------------------------------------------

pub fn save_vae(path: &Path, params: &VaeParams, latent_scale: f64, f32_storage: bool) -> Result<()> {
    let mut header = CheckpointHeader::new("vae");
    header.vae = Some(VaeConfigJson {
        latent_channels: params.config.latent_channels,
        base_width: params.config.base_width,
    });
    header.latent_scale = Some(latent_scale);
    write_checkpoint(path, &header, &params.named(), f32_storage)
}

pub fn load_vae(path: &Path) -> Result<(VaeParams, f64)> {
    let (header, table) = read_checkpoint(path)?;
    if header.kind != "vae" {
        return Err(CliError::format(path, format!("expected a vae checkpoint, got `{}`", header.kind)));
    }
    let cfg = header
        .vae
        .ok_or_else(|| CliError::format(path, "missing vae config"))?
        .config();
    let mut params = init_vae(&cfg, &mut Rng::new(0))?;
    fill_named(path, params.named_mut(), &table)?;
    Ok((params, header.latent_scale.unwrap_or(1.0)))
}

pub fn save_denoiser(
    path: &Path,
    params: &DenoiserParams,
    schedule: &ScheduleJson,
    f32_storage: bool,
) -> Result<()> {
    let mut header = CheckpointHeader::new("denoiser");
    header.denoiser = Some((&params.config).into());
    header.schedule = Some(schedule.clone());
    write_checkpoint(path, &header, &params.named(), f32_storage)
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserParams, ScheduleJson)> {
    let (header, table) = read_checkpoint(path)?;
    if header.kind != "denoiser" {
        return Err(CliError::format(path, format!("expected a denoiser checkpoint, got `{}`", header.kind)));
    }
    let cfg = header
        .denoiser
        .ok_or_else(|| CliError::format(path, "missing denoiser config"))?
        .config();
    let mut params = init_denoiser(&cfg, &mut Rng::new(0))?;
    fill_named(path, params.named_mut(), &table)?;
    let schedule = header
        .schedule
        .ok_or_else(|| CliError::format(path, "missing schedule"))?;
    Ok((params, schedule))
}

pub fn save_control(
    path: &Path,
    branch: &ControlBranch,
    kind: &str,
    denoiser_config: &DenoiserConfig,
    base_hash: &str,
    f32_storage: bool,
) -> Result<()> {
    let mut header = CheckpointHeader::new("control");
    header.denoiser = Some(denoiser_config.into());
    header.control_kind = Some(kind.into());
    header.base_hash = Some(base_hash.into());
    write_checkpoint(path, &header, &branch.named(), f32_storage)
}

pub fn load_control(path: &Path) -> Result<(ControlBranch, String, DenoiserConfig)> {
    let (header, table) = read_checkpoint(path)?;
    if header.kind != "control" {
        return Err(CliError::format(path, format!("expected a control checkpoint, got `{}`", header.kind)));
    }
    let cfg = header
        .denoiser
        .ok_or_else(|| CliError::format(path, "missing denoiser config"))?
        .config();
    let host = init_denoiser(&cfg, &mut Rng::new(0))?;
    let mut branch = init_control(&host, &mut Rng::new(0));
    fill_named(path, branch.named_mut(), &table)?;
    let kind = header
        .control_kind
        .ok_or_else(|| CliError::format(path, "missing control kind"))?;
    Ok((branch, kind, cfg))
}

/// Adapter-only checkpoint: small file, references the base by content hash.
pub fn save_lora(path: &Path, adapters: &[LoraAdapter], base_hash: &str, f32_storage: bool) -> Result<()> {
    let (rank, alpha) = adapters
        .first()
        .map(|a| (a.rank, a.alpha))
        .unwrap_or((sdf_core::lora::DEFAULT_LORA_RANK, sdf_core::lora::DEFAULT_LORA_ALPHA));
    let mut header = CheckpointHeader::new("lora");
    header.base_hash = Some(base_hash.into());
    header.lora = Some(LoraHeaderJson {
        rank,
        alpha,
        targets: adapters.iter().map(|a| a.target.clone()).collect(),
    });
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (i, ad) in adapters.iter().enumerate() {
        tensors.push((format!("adapter.{i}.a"), &ad.a));
        tensors.push((format!("adapter.{i}.b"), &ad.b));
    }
    write_checkpoint(path, &header, &tensors, f32_storage)
}

pub fn load_lora(path: &Path) -> Result<(Vec<LoraAdapter>, String)> {
    let (header, table) = read_checkpoint(path)?;
    if header.kind != "lora" {
        return Err(CliError::format(path, format!("expected a lora checkpoint, got `{}`", header.kind)));
    }
    let meta = header.lora.ok_or_else(|| CliError::format(path, "missing lora header"))?;
    let mut adapters = Vec::with_capacity(meta.targets.len());
    for (i, target) in meta.targets.iter().enumerate() {
        let a = table
            .get(&format!("adapter.{i}.a"))
            .ok_or_else(|| CliError::format(path, format!("missing adapter.{i}.a")))?
            .clone();
        let b = table
            .get(&format!("adapter.{i}.b"))
            .ok_or_else(|| CliError::format(path, format!("missing adapter.{i}.b")))?
            .clone();
        adapters.push(LoraAdapter { target: target.clone(), a, b, alpha: meta.alpha, rank: meta.rank });
    }
    let base_hash = header.base_hash.unwrap_or_default();
    Ok((adapters, base_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sdf_core::lora::{default_targets, wrap_lora};

    #[test]
    fn vae_checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.sdfc");
        let cfg = VaeConfig { latent_channels: 2, base_width: 4 };
        let params = init_vae(&cfg, &mut Rng::new(5)).unwrap();
        save_vae(&path, &params, 2.5, false).unwrap();
        let (back, scale) = load_vae(&path).unwrap();
        assert_eq!(scale, 2.5);
        for ((na, ta), (_, tb)) in params.named().iter().zip(back.named().iter()) {
            assert_eq!(ta, tb, "tensor {na}");
        }
    }

    #[test]
    fn denoiser_checkpoint_round_trip_and_f32_mode() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DenoiserConfig { latent_channels: 2, base_width: 8, emb_dim: 16, text_dim: 8, cond_channels: 1 };
        let params = init_denoiser(&cfg, &mut Rng::new(6)).unwrap();
        let sched = ScheduleJson::desk_default();

        let exact = dir.path().join("d64.sdfc");
        save_denoiser(&exact, &params, &sched, false).unwrap();
        let (back, sched_back) = load_denoiser(&exact).unwrap();
        assert_eq!(sched_back, sched);
        for ((na, ta), (_, tb)) in params.named().iter().zip(back.named().iter()) {
            assert_eq!(ta, tb, "tensor {na}");
        }

        let compact = dir.path().join("d32.sdfc");
        save_denoiser(&compact, &params, &sched, true).unwrap();
        let (approx, _) = load_denoiser(&compact).unwrap();
        let mut worst = 0.0f64;
        for ((_, ta), (_, tb)) in params.named().iter().zip(approx.named().iter()) {
            worst = worst.max(ta.max_abs_diff(tb));
        }
        assert!(worst > 0.0 && worst < 1e-6, "f32 storage error {worst}");
        assert!(std::fs::metadata(&compact).unwrap().len() < std::fs::metadata(&exact).unwrap().len());
    }

    #[test]
    fn lora_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lora.sdfc");
        let cfg = DenoiserConfig { latent_channels: 2, base_width: 8, emb_dim: 16, text_dim: 8, cond_channels: 1 };
        let base = init_denoiser(&cfg, &mut Rng::new(7)).unwrap();
        let model = wrap_lora(&base, 2, 4.0, &default_targets(&base), &mut Rng::new(8)).unwrap();
        save_lora(&path, &model.adapters, "deadbeef", false).unwrap();
        let (adapters, hash) = load_lora(&path).unwrap();
        assert_eq!(hash, "deadbeef");
        assert_eq!(adapters, model.adapters);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.sdfc");
        let cfg = VaeConfig { latent_channels: 2, base_width: 4 };
        let params = init_vae(&cfg, &mut Rng::new(9)).unwrap();
        save_vae(&path, &params, 1.0, false).unwrap();
        assert!(load_denoiser(&path).is_err());
    }
}
