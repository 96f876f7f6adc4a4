//! Image-set statistics: global and per-pixel moments, optionally compared
//! against a reference set (relative L1 distance between the mean and std
//! maps).

use crate::dataset;
use crate::error::{CliError, Result};
use crate::pgm;
use sdf_core::stats::{mean_std, per_pixel_mean_std, rel_l1};
use sdf_core::Tensor;
use serde::Serialize;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct StatsReport {
    pub count: usize,
    pub global_mean: f64,
    pub global_std: f64,
    pub pixel_mean_avg: f64,
    pub pixel_std_avg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_map_rel_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_map_rel_l1: Option<f64>,
}

/// Load a tile set: a dataset directory (with `manifest.jsonl`, filtered by
/// tier when given) or a plain directory of `.pgm` files in name order.
pub fn load_images(dir: &Path, tier: Option<&str>) -> Result<Vec<Tensor>> {
    if dir.join("manifest.jsonl").exists() {
        let manifest = dataset::read_manifest(dir)?;
        let mut out = Vec::new();
        for rec in &manifest {
            if tier.map(|t| t == rec.tier).unwrap_or(true) {
                out.push(pgm::read_pgm(&dir.join(&rec.tile_path))?);
            }
        }
        if out.is_empty() {
            return Err(CliError::Run(format!("no tiles matched in {}", dir.display())));
        }
        return Ok(out);
    }
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Run(format!("no .pgm files in {}", dir.display())));
    }
    names.iter().map(|p| pgm::read_pgm(p)).collect()
}

pub fn stats_for(images: &[Tensor], reference: Option<&[Tensor]>) -> Result<StatsReport> {
    let all: Vec<f64> = images.iter().flat_map(|t| t.data().iter().copied()).collect();
    let (global_mean, global_std) = mean_std(&all);
    let (mean_map, std_map) = per_pixel_mean_std(images)?;
    let (mut mean_rel, mut std_rel) = (None, None);
    if let Some(reference) = reference {
        let (ref_mean, ref_std) = per_pixel_mean_std(reference)?;
        mean_rel = Some(rel_l1(&mean_map, &ref_mean)?);
        std_rel = Some(rel_l1(&std_map, &ref_std)?);
    }
    Ok(StatsReport {
        count: images.len(),
        global_mean,
        global_std,
        pixel_mean_avg: mean_map.mean(),
        pixel_std_avg: std_map.mean(),
        mean_map_rel_l1: mean_rel,
        std_map_rel_l1: std_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_and_reference_comparison() {
        let imgs = vec![Tensor::full(&[1, 1, 4, 4], 0.25), Tensor::full(&[1, 1, 4, 4], 0.75)];
        let report = stats_for(&imgs, Some(&imgs)).unwrap();
        assert_eq!(report.count, 2);
        assert!((report.global_mean - 0.5).abs() < 1e-12);
        assert!((report.pixel_std_avg - 0.25).abs() < 1e-12);
        assert_eq!(report.mean_map_rel_l1, Some(0.0));
        assert_eq!(report.std_map_rel_l1, Some(0.0));
    }
}
