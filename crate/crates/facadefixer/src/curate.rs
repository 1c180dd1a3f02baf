//! Dataset curation driver: quality gate, negative-concept filter, dedup.

use std::collections::BTreeMap;
use std::path::Path;

use facadefixer_core::curation::{dedup, negative_filter, quality_gate, CurationConfig, QualityReport};
use facadefixer_core::geometry::DefectCategory;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetItem;
use crate::error::{write_atomic, write_json, Error, Result};
use crate::gateway::{EmbedInput, Gateway};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationManifest {
    pub kept: Vec<String>,
    pub dropped: Vec<Dropped>,
    pub quality: Vec<QualityReport>,
}

fn concept_embeddings<'a>(
    gateway: &Gateway,
    names: impl IntoIterator<Item = &'a str>,
) -> Result<Vec<(String, Vec<f32>)>> {
    names
        .into_iter()
        .map(|n| Ok((n.to_string(), gateway.embed_default(EmbedInput::Text(n))?)))
        .collect()
}

/// Runs the three curation stages over `items`. Positive concepts are the
/// six category names.
pub fn curate(items: &[DatasetItem], cfg: &CurationConfig, gateway: &Gateway) -> Result<CurationManifest> {
    cfg.validate()?;
    let negatives = concept_embeddings(gateway, cfg.negative_concepts.iter().map(String::as_str))?;
    let positives = concept_embeddings(gateway, DefectCategory::ALL.iter().map(|c| c.as_str()))?;
    let mut quality = Vec::with_capacity(items.len());
    let mut dropped = Vec::new();
    let mut survivors = Vec::new();
    for item in items {
        let image = item.load_image()?;
        let report = quality_gate(item.id(), &image, cfg);
        let passed = report.passed;
        let reason = report.reason.clone();
        quality.push(report);
        if !passed {
            dropped.push(Dropped {
                id: item.id().into(),
                reason: format!("quality: {}", reason.unwrap_or_default()),
            });
            continue;
        }
        let embedding = gateway.embed_default(EmbedInput::Image(&image))?;
        let decision = negative_filter(&embedding, &negatives, &positives, cfg.negative_margin)?;
        if !decision.keep {
            dropped.push(Dropped {
                id: item.id().into(),
                reason: format!("negative concept: {}", decision.offending.unwrap_or_default()),
            });
            continue;
        }
        survivors.push((item.id().to_string(), embedding));
    }
    let keep = dedup(&survivors, cfg.dedup_threshold)?;
    for (id, _) in &survivors {
        if !keep.contains(id) {
            dropped.push(Dropped {
                id: id.clone(),
                reason: "near-duplicate".into(),
            });
        }
    }
    dropped.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(CurationManifest {
        kept: keep.into_iter().collect(),
        dropped,
        quality,
    })
}

/// Writes `manifest.json` and `quality.csv` (one row per image) into `dir`.
pub fn write_manifest(dir: &Path, manifest: &CurationManifest) -> Result<()> {
    write_json(&dir.join("manifest.json"), manifest)?;
    let path = dir.join("quality.csv");
    let check_names: Vec<String> = manifest
        .quality
        .first()
        .map(|q| q.checks.iter().map(|c| c.name.clone()).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id".to_string(), "passed".into(), "reason".into()];
    header.extend(check_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::format(&path, e))?;
    let status: BTreeMap<&str, &str> = manifest
        .kept
        .iter()
        .map(|k| (k.as_str(), "kept"))
        .chain(manifest.dropped.iter().map(|d| (d.id.as_str(), d.reason.as_str())))
        .collect();
    for q in &manifest.quality {
        let mut row = vec![
            q.image_id.clone(),
            q.passed.to_string(),
            status.get(q.image_id.as_str()).copied().unwrap_or("").to_string(),
        ];
        row.extend(q.checks.iter().map(|c| c.value.to_string()));
        w.write_record(&row).map_err(|e| Error::format(&path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(&path, e))?;
    write_atomic(&path, &bytes)
}
