//! Defect memory bank: crop/mask/category/text tuples indexed by embedding.
//!
//! Retrieval is an exact linear cosine scan. Ties rank by id ascending.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, BoundingBox, DefectCategory, ImageRef, RasterImage};

pub const DEFAULT_DIM: usize = 512;

/// Smallest uniform scale a stored mask may be shrunk by to fit a region.
pub const MIN_FIT_SCALE: f64 = 0.5;
/// Largest tolerated ratio between mask and region aspect ratios.
pub const MAX_ASPECT_RATIO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub id: String,
    pub crop: ImageRef,
    pub crop_pixels: RasterImage,
    /// Mask in crop coordinates.
    pub mask: BinaryMask,
    pub category: DefectCategory,
    pub text: String,
    pub embedding: Vec<f32>,
    pub provenance: Provenance,
    pub created_at: u64,
}

impl MemoryEntry {
    /// Tight mask bounds inside the crop, if the mask has any pixel set.
    pub fn mask_bounds(&self) -> Option<(u32, u32, u32, u32)> {
        self.mask.tight_bounds()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundTemplate {
    pub id: String,
    pub image: ImageRef,
    pub pixels: RasterImage,
    pub embedding: Vec<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub category: Option<DefectCategory>,
    pub embedding: Vec<f32>,
    pub k: usize,
    /// Restricts results to entries whose mask fits this placement region.
    pub region: Option<BoundingBox>,
}

/// Ids become directory names on disk, so they are restricted to a portable alphabet.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!("invalid id {id:?}")))
    }
}

fn norm(v: &[f32]) -> f64 {
    libm::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum::<f64>())
}

/// Cosine similarity; `None` when either vector has zero norm or the lengths differ.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Some(dot / (na * nb))
}

/// Scale at which a `mask_w`×`mask_h` defect is placed into `region`, or
/// `None` if the fit rule rejects it: the scale must land in
/// `[MIN_FIT_SCALE, 1]` and the aspect ratios may differ by at most `MAX_ASPECT_RATIO`.
pub fn fit_scale(mask_w: u32, mask_h: u32, region: &BoundingBox) -> Option<f64> {
    if mask_w == 0 || mask_h == 0 {
        return None;
    }
    let (mw, mh) = (mask_w as f64, mask_h as f64);
    let scale = (region.w / mw).min(region.h / mh).min(1.0);
    let aspect = (mw / mh) / (region.w / region.h);
    let aspect_ok = (1.0 / MAX_ASPECT_RATIO..=MAX_ASPECT_RATIO).contains(&aspect);
    (scale >= MIN_FIT_SCALE && aspect_ok).then_some(scale)
}

/// In-memory bank. Mutation takes `&mut self`; the std side wraps it in a
/// lock for the single-writer, multi-reader contract.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    entries: BTreeMap<String, MemoryEntry>,
    backgrounds: BTreeMap<String, BackgroundTemplate>,
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl MemoryBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
            backgrounds: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.values()
    }

    pub fn backgrounds(&self) -> impl Iterator<Item = &BackgroundTemplate> {
        self.backgrounds.values()
    }

    pub fn get(&self, id: &str) -> Option<&MemoryEntry> {
        self.entries.get(id)
    }

    pub fn background(&self, id: &str) -> Option<&BackgroundTemplate> {
        self.backgrounds.get(id)
    }

    fn check_dim(&self, id: &str, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                id: id.into(),
                expected: self.dim,
                found: v.len(),
            });
        }
        Ok(())
    }

    pub fn insert(&mut self, entry: MemoryEntry) -> Result<String> {
        validate_id(&entry.id)?;
        if self.entries.contains_key(&entry.id) {
            return Err(Error::DuplicateId(entry.id));
        }
        self.check_dim(&entry.id, &entry.embedding)?;
        if entry.mask.dims() != entry.crop_pixels.dims() || entry.crop.dims() != entry.crop_pixels.dims() {
            return Err(Error::Shape {
                expected: entry.crop_pixels.dims(),
                found: entry.mask.dims(),
            });
        }
        let id = entry.id.clone();
        self.entries.insert(id.clone(), entry);
        Ok(id)
    }

    pub fn insert_background(&mut self, template: BackgroundTemplate) -> Result<String> {
        validate_id(&template.id)?;
        if self.backgrounds.contains_key(&template.id) {
            return Err(Error::DuplicateId(template.id));
        }
        self.check_dim(&template.id, &template.embedding)?;
        if template.image.dims() != template.pixels.dims() {
            return Err(Error::Shape {
                expected: template.image.dims(),
                found: template.pixels.dims(),
            });
        }
        let id = template.id.clone();
        self.backgrounds.insert(id.clone(), template);
        Ok(id)
    }

    fn check_query(&self, embedding: &[f32]) -> Result<()> {
        self.check_dim("query", embedding)?;
        if norm(embedding) == 0.0 {
            return Err(Error::ZeroNorm("query".into()));
        }
        Ok(())
    }

    /// Entries matching the filters, ranked by cosine similarity descending.
    pub fn query_top_k(&self, spec: &QuerySpec) -> Result<Vec<(&MemoryEntry, f64)>> {
        if spec.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        self.check_query(&spec.embedding)?;
        let mut hits = Vec::new();
        for e in self.entries.values() {
            if spec.category.is_some_and(|c| c != e.category) {
                continue;
            }
            if let Some(region) = &spec.region {
                let fits = e
                    .mask_bounds()
                    .and_then(|(x0, y0, x1, y1)| fit_scale(x1 - x0, y1 - y0, region))
                    .is_some();
                if !fits {
                    continue;
                }
            }
            let sim = cosine(&spec.embedding, &e.embedding).ok_or_else(|| Error::ZeroNorm(e.id.clone()))?;
            hits.push((e, sim));
        }
        // BTreeMap iteration is id-ascending and the sort is stable.
        hits.sort_by(|a, b| b.1.total_cmp(&a.1));
        hits.truncate(spec.k);
        Ok(hits)
    }

    /// Highest-cosine entry of `category` whose mask satisfies the fit rule for `region`.
    pub fn retrieve_compatible_mask(
        &self,
        region: &BoundingBox,
        category: DefectCategory,
        embedding: &[f32],
    ) -> Result<Option<&MemoryEntry>> {
        let spec = QuerySpec {
            category: Some(category),
            embedding: embedding.into(),
            k: 1,
            region: Some(*region),
        };
        Ok(self.query_top_k(&spec)?.into_iter().next().map(|(e, _)| e))
    }

    pub fn query_backgrounds(&self, embedding: &[f32], k: usize) -> Result<Vec<(&BackgroundTemplate, f64)>> {
        self.check_query(embedding)?;
        let mut hits = Vec::new();
        for t in self.backgrounds.values() {
            let sim = cosine(embedding, &t.embedding).ok_or_else(|| Error::ZeroNorm(t.id.clone()))?;
            hits.push((t, sim));
        }
        hits.sort_by(|a, b| b.1.total_cmp(&a.1));
        hits.truncate(k);
        Ok(hits)
    }

    /// Per-category entry counts.
    pub fn category_counts(&self) -> BTreeMap<DefectCategory, usize> {
        let mut counts = BTreeMap::new();
        for e in self.entries.values() {
            *counts.entry(e.category).or_insert(0) += 1;
        }
        counts
    }
}
