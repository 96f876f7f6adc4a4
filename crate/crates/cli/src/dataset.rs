//! Dataset generation and loading.
//!
//! A dataset directory holds 16-bit PGM tiles under `tiles/`, their paired
//! noiseless reflectivity renders under `pairs/`, and a `manifest.jsonl`
//! with one record per tile. Generation is a pure function of (config,
//! seed): scenes are rendered and speckled at the finest tier, coarser
//! tiers are intensity box-averages of the same speckled scene (so
//! multilooking falls out of the averaging), and every tier is tiled on the
//! same grid. Scene work is parallel; outputs are collected in scene order,
//! so the bytes on disk do not depend on the thread count.

use crate::config::DataGenConfig;
use crate::error::{CliError, Result};
use crate::fsutil;
use crate::pgm;
use rayon::prelude::*;
use sdf_core::ops;
use sdf_core::sar::{self, ResTag};
use sdf_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TileRecord {
    pub tile_id: String,
    pub tier: String,
    pub scene_seed: u64,
    pub caption: Vec<String>,
    pub tile_path: String,
    pub pair_path: String,
}

struct SceneOutput {
    records: Vec<TileRecord>,
    images: Vec<(String, Tensor)>, // relative path → image
}

fn generate_scene(cfg: &DataGenConfig, dataset_seed: u64, scene_idx: usize) -> Result<SceneOutput> {
    let scene_seed = Rng::with_stream(dataset_seed, scene_idx as u64).next_u64();
    let scene = sar::random_scene(scene_seed, cfg.scene_size);
    let reflectivity = sar::render_reflectivity(&scene, ResTag::Sd40)?;
    let class_map = sar::render_class_map(&scene);
    let mut speckle_rng = Rng::with_stream(scene_seed, 1);
    let speckled = sar::apply_speckle(&reflectivity, cfg.looks, &mut speckle_rng)?;

    let mut records = Vec::new();
    let mut images = Vec::new();
    for tag in sar::ALL_TIERS {
        let f = tag.factor();
        if cfg.scene_size / f < cfg.tile_size {
            continue;
        }
        let intensity = ops::box_downsample(&speckled, f)?;
        let amplitude = sar::standardize_dynamics(&intensity, cfg.clip_quantile)?;
        let pair_int = ops::box_downsample(&reflectivity, f)?;
        let pair_amp = sar::standardize_dynamics(&pair_int, cfg.clip_quantile)?;
        let tiles = sar::tile(&amplitude, cfg.tile_size, cfg.stride)?;
        let pairs = sar::tile(&pair_amp, cfg.tile_size, cfg.stride)?;
        let extent = cfg.scene_size / f;
        for (idx, (tile_img, pair_img)) in tiles.into_iter().zip(pairs).enumerate() {
            let (oy, ox) = sar::tile_origin(extent, extent, cfg.tile_size, cfg.stride, idx);
            // class presence judged on the sd40-resolution footprint
            let classes = sar::classes_in_region(
                &class_map,
                cfg.scene_size,
                ox * f,
                oy * f,
                (ox + cfg.tile_size) * f,
                (oy + cfg.tile_size) * f,
            );
            let mut caption: Vec<String> = vec![tag.token().to_string()];
            caption.extend(classes.iter().map(|c| c.to_string()));
            let tile_id = format!("s{scene_idx:04}_{}_{idx:03}", tag.token());
            let tile_path = format!("tiles/{tile_id}.pgm");
            let pair_path = format!("pairs/{tile_id}.pgm");
            records.push(TileRecord {
                tile_id,
                tier: tag.token().to_string(),
                scene_seed,
                caption,
                tile_path: tile_path.clone(),
                pair_path: pair_path.clone(),
            });
            images.push((tile_path, tile_img));
            images.push((pair_path, pair_img));
        }
    }
    Ok(SceneOutput { records, images })
}

/// Generate the dataset under `out_dir`; returns the manifest records in
/// their on-disk order.
pub fn make_dataset(
    cfg: &DataGenConfig,
    seed: u64,
    out_dir: &Path,
    threads: usize,
) -> Result<Vec<TileRecord>> {
    cfg.validate()?;
    let scene_ids: Vec<usize> = (0..cfg.scenes).collect();
    let outputs: Vec<Result<SceneOutput>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Run(format!("thread pool: {e}")))?;
        pool.install(|| scene_ids.par_iter().map(|&i| generate_scene(cfg, seed, i)).collect())
    } else {
        scene_ids.iter().map(|&i| generate_scene(cfg, seed, i)).collect()
    };

    let mut manifest = Vec::new();
    let mut manifest_bytes: Vec<u8> = Vec::new();
    for out in outputs {
        let out = out?;
        for (rel, img) in &out.images {
            pgm::write_pgm(&out_dir.join(rel), img, true)?;
        }
        for rec in out.records {
            let line = serde_json::to_string(&rec).map_err(|e| CliError::Run(e.to_string()))?;
            manifest_bytes.extend_from_slice(line.as_bytes());
            manifest_bytes.push(b'\n');
            manifest.push(rec);
        }
    }
    fsutil::write_atomic(&out_dir.join("manifest.jsonl"), &manifest_bytes)?;
    Ok(manifest)
}

pub fn read_manifest(dataset_dir: &Path) -> Result<Vec<TileRecord>> {
    let path = dataset_dir.join("manifest.jsonl");
    let bytes = fsutil::read_bytes(&path)?;
    let mut out = Vec::new();
    for (lineno, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec: TileRecord = serde_json::from_slice(line)
            .map_err(|e| CliError::format(&path, format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// In-memory tile set for one tier.
pub struct LoadedDataset {
    pub tiles: Vec<Tensor>,
    pub pairs: Vec<Tensor>,
    pub captions: Vec<Vec<String>>,
}

pub fn load_tier(dataset_dir: &Path, tier: &str) -> Result<LoadedDataset> {
    let manifest = read_manifest(dataset_dir)?;
    let mut tiles = Vec::new();
    let mut pairs = Vec::new();
    let mut captions = Vec::new();
    for rec in manifest.iter().filter(|r| r.tier == tier) {
        tiles.push(pgm::read_pgm(&dataset_dir.join(&rec.tile_path))?);
        pairs.push(pgm::read_pgm(&dataset_dir.join(&rec.pair_path))?);
        captions.push(rec.caption.clone());
    }
    if tiles.is_empty() {
        return Err(CliError::Run(format!(
            "dataset {} has no `{tier}` tiles",
            dataset_dir.display()
        )));
    }
    Ok(LoadedDataset { tiles, pairs, captions })
}

/// Append-style debug dump of a manifest (used by a few commands).
pub fn write_manifest_to(writer: &mut impl Write, records: &[TileRecord]) -> std::io::Result<()> {
    for rec in records {
        writeln!(writer, "{}", serde_json::to_string(rec).unwrap())?;
    }
    Ok(())
}

/// Artifact paths produced by a dataset run (for run manifests).
pub fn artifact_paths(out_dir: &Path, records: &[TileRecord]) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = vec![out_dir.join("manifest.jsonl")];
    v.extend(records.iter().flat_map(|r| {
        [out_dir.join(&r.tile_path), out_dir.join(&r.pair_path)]
    }));
    v
}
