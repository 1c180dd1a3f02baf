//! Dataset refinement: semantic deduplication, negative-concept filtering,
//! and a resolution/aspect/blur quality gate.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RasterImage;
use crate::memory::cosine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub dedup_threshold: f64,
    /// Concept names; their embeddings are resolved by an embedder.
    pub negative_concepts: Vec<String>,
    pub negative_margin: f64,
    pub min_side: u32,
    pub aspect_range: (f64, f64),
    pub blur_min_variance: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            dedup_threshold: 0.95,
            negative_concepts: ["pipes", "windows", "air conditioners"].map(String::from).to_vec(),
            negative_margin: 0.0,
            min_side: 512,
            aspect_range: (1.0 / 3.0, 3.0),
            blur_min_variance: 100.0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold < 1.0) {
            return Err(Error::Config(alloc::format!(
                "dedup_threshold {} outside (0, 1)",
                self.dedup_threshold
            )));
        }
        if self.aspect_range.0 >= self.aspect_range.1 {
            return Err(Error::Config("aspect_range low must be below high".into()));
        }
        Ok(())
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Keeps the lowest id of every connected component of the graph whose
/// edges join items with cosine ≥ `threshold`.
pub fn dedup(items: &[(String, Vec<f32>)], threshold: f64) -> Result<BTreeSet<String>> {
    let Some((_, first)) = items.first() else {
        return Ok(BTreeSet::new());
    };
    let dim = first.len();
    for (id, v) in items {
        if v.len() != dim {
            return Err(Error::Dimension {
                id: id.clone(),
                expected: dim,
                found: v.len(),
            });
        }
        if v.iter().all(|&x| x == 0.0) {
            return Err(Error::ZeroNorm(id.clone()));
        }
    }
    let n = items.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            let sim = cosine(&items[i].1, &items[j].1).ok_or_else(|| Error::ZeroNorm(items[i].0.clone()))?;
            if sim >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut best: Vec<Option<&str>> = alloc::vec![None; n];
    for (i, (id, _)) in items.iter().enumerate() {
        let root = find(&mut parent, i);
        if best[root].is_none_or(|b| id.as_str() < b) {
            best[root] = Some(id);
        }
    }
    Ok(best.into_iter().flatten().map(ToString::to_string).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    /// Best-matching negative concept when the image is dropped.
    pub offending: Option<String>,
    pub negative_score: f64,
    pub positive_score: f64,
}

/// Drops an image whose best negative-concept cosine strictly exceeds its
/// best positive-concept cosine plus `margin`.
pub fn negative_filter(
    embedding: &[f32],
    negatives: &[(String, Vec<f32>)],
    positives: &[(String, Vec<f32>)],
    margin: f64,
) -> Result<FilterDecision> {
    let best = |concepts: &[(String, Vec<f32>)]| -> Result<Option<(usize, f64)>> {
        let mut top: Option<(usize, f64)> = None;
        for (i, (name, v)) in concepts.iter().enumerate() {
            if v.len() != embedding.len() {
                return Err(Error::Dimension {
                    id: name.clone(),
                    expected: embedding.len(),
                    found: v.len(),
                });
            }
            let sim = cosine(embedding, v).ok_or_else(|| Error::ZeroNorm(name.clone()))?;
            if top.is_none_or(|(_, s)| sim > s) {
                top = Some((i, sim));
            }
        }
        Ok(top)
    };
    let Some((neg_idx, negative_score)) = best(negatives)? else {
        return Ok(FilterDecision {
            keep: true,
            offending: None,
            negative_score: 0.0,
            positive_score: 0.0,
        });
    };
    let positive_score = best(positives)?.map_or(0.0, |(_, s)| s);
    let keep = negative_score <= positive_score + margin;
    Ok(FilterDecision {
        keep,
        offending: (!keep).then(|| negatives[neg_idx].0.clone()),
        negative_score,
        positive_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityCheck {
    pub name: String,
    pub value: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub image_id: String,
    pub passed: bool,
    pub checks: Vec<QualityCheck>,
    /// Name of the first failing check.
    pub reason: Option<String>,
}

/// Variance of the 4-neighbour Laplacian of the luma channel over interior
/// pixels (the one-pixel border is excluded). 0 for images without interior.
pub fn laplacian_variance(image: &RasterImage) -> f64 {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let luma = image.luma();
    let at = |x: usize, y: usize| luma[y * w + x];
    let n = ((w - 2) * (h - 2)) as f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let l = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            sum += l;
            sum_sq += l * l;
        }
    }
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

pub fn quality_gate(image_id: &str, image: &RasterImage, cfg: &CurationConfig) -> QualityReport {
    let (w, h) = image.dims();
    let min_side = w.min(h) as f64;
    let aspect = w as f64 / h as f64;
    let blur = laplacian_variance(image);
    let checks = alloc::vec![
        QualityCheck {
            name: "resolution".into(),
            value: min_side,
            pass: min_side >= cfg.min_side as f64,
        },
        QualityCheck {
            name: "aspect_ratio".into(),
            value: aspect,
            pass: aspect >= cfg.aspect_range.0 && aspect <= cfg.aspect_range.1,
        },
        QualityCheck {
            name: "blur".into(),
            value: blur,
            pass: blur >= cfg.blur_min_variance,
        },
    ];
    let reason = checks.iter().find(|c| !c.pass).map(|c| c.name.clone());
    QualityReport {
        image_id: image_id.into(),
        passed: reason.is_none(),
        checks,
        reason,
    }
}
