//! Recomposition stages wired to the gateway and the on-disk bank.

use std::collections::BTreeSet;
use std::path::Path;

use facadefixer_core::geometry::{BinaryMask, DefectCategory, ImageRef, RasterImage};
use facadefixer_core::hash::{digest_parts, hex};
use facadefixer_core::memory::{BackgroundTemplate, MemoryBank, MemoryEntry, Provenance};
use facadefixer_core::recompose::{
    archive_synthetic, build_inpaint_job, composed_instance_mask, margin_region, mock_compose, plan_placement,
    verify_label_consistency, AugmentedSample, BlendParams, ConsistencyReport, ConsistencyThresholds, Instance,
    Lineage,
};
use serde::{Deserialize, Serialize};

use crate::bank_store::BankStore;
use crate::dataset::{write_item, Annotation, Sidecar, SidecarImage};
use crate::error::Result;
use crate::gateway::{EmbedInput, Endpoint, ExpertKind, Gateway, GeneratorRequest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecomposeSettings {
    pub dilation_radius: u32,
    pub blend: BlendParams,
    pub thresholds: ConsistencyThresholds,
    /// Timestamp stamped on archived entries. Fixed rather than read from
    /// the clock so that runs stay reproducible.
    pub created_at: u64,
}

impl Default for RecomposeSettings {
    fn default() -> Self {
        Self {
            dilation_radius: 2,
            blend: BlendParams::default(),
            thresholds: ConsistencyThresholds::default(),
            created_at: 0,
        }
    }
}

fn short_hash(parts: &[&[u8]]) -> String {
    hex(&digest_parts(parts))[..16].to_string()
}

pub fn background_id(image_id: &str, pixels: &RasterImage) -> String {
    format!("bg-{}", short_hash(&[image_id.as_bytes(), pixels.as_bytes()]))
}

pub fn sample_id(lineage: &Lineage) -> String {
    let mut parts: Vec<&[u8]> = vec![lineage.background_id.as_bytes()];
    parts.extend(lineage.entry_ids.iter().map(|e| e.as_bytes()));
    let seed = lineage.seed.to_le_bytes();
    parts.push(&seed);
    format!("aug-{}", short_hash(&parts))
}

pub(crate) fn embedder(gateway: &Gateway) -> impl FnMut(&RasterImage) -> facadefixer_core::Result<Vec<f32>> + '_ {
    move |img| {
        gateway
            .embed_default(EmbedInput::Image(img))
            .map_err(|e| facadefixer_core::Error::External(e.to_string()))
    }
}

/// Inpaints the instance regions of `pixels` into a clean background.
pub fn decouple(
    gateway: &Gateway,
    image: &ImageRef,
    pixels: &RasterImage,
    masks: &[BinaryMask],
    radius: u32,
    seed: u64,
) -> Result<BackgroundTemplate> {
    let job = build_inpaint_job(image, &[], masks, radius)?;
    let generator = gateway.first_of(ExpertKind::Generator)?;
    let clean = gateway.call_generator(&GeneratorRequest::Inpaint { pixels, job: &job, seed }, generator)?;
    let embedding = gateway.embed_default(EmbedInput::Image(&clean))?;
    let id = background_id(&image.id, &clean);
    let (w, h) = clean.dims();
    Ok(BackgroundTemplate {
        image: ImageRef::new(id.clone(), format!("backgrounds/{id}/image.png"), w, h)?,
        id,
        pixels: clean,
        embedding,
        provenance: Provenance::Real,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub category: DefectCategory,
    /// `None` when the bank holds no compatible entry.
    pub entry_id: Option<String>,
}

/// One compatible entry per requested category, placed in the background's margin rectangle.
pub fn retrieve(bank: &MemoryBank, background: &BackgroundTemplate, categories: &BTreeSet<DefectCategory>) -> Result<Vec<Retrieval>> {
    let (w, h) = background.pixels.dims();
    let region = margin_region(w, h);
    categories
        .iter()
        .map(|&category| {
            let entry_id = match &region {
                Some(r) => bank
                    .retrieve_compatible_mask(r, category, &background.embedding)?
                    .map(|e| e.id.clone()),
                None => None,
            };
            Ok(Retrieval { category, entry_id })
        })
        .collect()
}

/// Blends `entry` onto `background`. A live generator failure falls back to
/// the mock blend and notes it in the lineage.
pub fn compose(
    gateway: &Gateway,
    background: &BackgroundTemplate,
    entry: &MemoryEntry,
    seed: u64,
    params: BlendParams,
) -> Result<AugmentedSample> {
    let spec = plan_placement(background, entry, seed, params)?;
    let generator = gateway.first_of(ExpertKind::Generator)?;
    if let Endpoint::Mock(_) = generator.endpoint {
        return Ok(mock_compose(&spec)?);
    }
    match gateway.call_generator(&GeneratorRequest::Compose { spec: &spec }, generator) {
        Ok(image) => {
            let mask = composed_instance_mask(&spec)?;
            let instances = if mask.is_empty() {
                Vec::new()
            } else {
                vec![Instance {
                    mask,
                    category: entry.category,
                    text: entry.text.clone(),
                }]
            };
            Ok(AugmentedSample {
                image,
                instances,
                lineage: Lineage {
                    background_id: background.id.clone(),
                    entry_ids: vec![entry.id.clone()],
                    seed,
                    notes: Vec::new(),
                },
            })
        }
        Err(e) => {
            let mut sample = mock_compose(&spec)?;
            sample.lineage.notes.push(format!("generator fallback: {e}"));
            Ok(sample)
        }
    }
}

pub fn verify(sample: &AugmentedSample, background: &BackgroundTemplate, settings: &RecomposeSettings) -> Result<ConsistencyReport> {
    Ok(verify_label_consistency(
        sample,
        &background.pixels,
        settings.blend.feather,
        settings.thresholds,
    )?)
}

/// Archives samples and their background into the bank in one write.
pub fn archive(
    store: &BankStore,
    background: Option<&BackgroundTemplate>,
    samples: &[&AugmentedSample],
    gateway: &Gateway,
    created_at: u64,
) -> Result<Vec<String>> {
    store.update(|bank| {
        if let Some(bg) = background {
            if bank.background(&bg.id).is_none() {
                bank.insert_background(bg.clone())?;
            }
        }
        let mut embed = embedder(gateway);
        let mut ids = Vec::new();
        for s in samples {
            ids.extend(archive_synthetic(s, bank, &mut embed, created_at)?);
        }
        Ok(ids)
    })
}

/// Writes a sample as a dataset item (`<id>.png` + `<id>.json`).
pub fn write_sample(dir: &Path, id: &str, sample: &AugmentedSample) -> Result<()> {
    let (width, height) = sample.image.dims();
    let instances = sample
        .instances
        .iter()
        .filter_map(|inst| {
            inst.mask.tight_box().map(|bbox| Annotation {
                bbox,
                category: inst.category,
                confidence: None,
                mask_rle: Some(inst.mask.to_rle()),
            })
        })
        .collect();
    let sidecar = Sidecar {
        image: SidecarImage {
            id: id.into(),
            width,
            height,
        },
        instances,
    };
    write_item(dir, id, &sample.image, &sidecar)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub category: DefectCategory,
    pub entry_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ConsistencyReport>,
    #[serde(default)]
    pub archived: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleResult {
    pub background: BackgroundTemplate,
    pub retrievals: Vec<Retrieval>,
    pub outcomes: Vec<SampleOutcome>,
    /// Samples parallel to the outcomes that produced one.
    pub samples: Vec<(String, AugmentedSample)>,
}

/// Full decouple → retrieve → place → compose → verify → archive cycle for
/// one image. Per-category failures are recorded and the cycle moves on.
#[allow(clippy::too_many_arguments)]
pub fn recompose_cycle(
    image: &ImageRef,
    pixels: &RasterImage,
    masks: &[BinaryMask],
    categories: &BTreeSet<DefectCategory>,
    store: &BankStore,
    gateway: &Gateway,
    seed: u64,
    settings: &RecomposeSettings,
) -> Result<CycleResult> {
    let background = decouple(gateway, image, pixels, masks, settings.dilation_radius, seed)?;
    let retrievals = retrieve(&store.read(), &background, categories)?;
    let mut outcomes = Vec::new();
    let mut samples = Vec::new();
    for r in &retrievals {
        let Some(entry_id) = &r.entry_id else { continue };
        let mut outcome = SampleOutcome {
            category: r.category,
            entry_id: entry_id.clone(),
            sample_id: None,
            lineage: None,
            report: None,
            archived: Vec::new(),
            error: None,
        };
        let step = (|| -> Result<(String, AugmentedSample, ConsistencyReport)> {
            let entry = store.read().get(entry_id).cloned().ok_or_else(|| {
                crate::Error::Config(format!("entry {entry_id} vanished from the bank"))
            })?;
            let sample = compose(gateway, &background, &entry, seed, settings.blend)?;
            let report = verify(&sample, &background, settings)?;
            Ok((sample_id(&sample.lineage), sample, report))
        })();
        match step {
            Ok((id, sample, report)) => {
                if report.consistent {
                    match archive(store, Some(&background), &[&sample], gateway, settings.created_at) {
                        Ok(ids) => outcome.archived = ids,
                        Err(e) => outcome.error = Some(e.to_string()),
                    }
                }
                outcome.sample_id = Some(id.clone());
                outcome.lineage = Some(sample.lineage.clone());
                outcome.report = Some(report);
                samples.push((id, sample));
            }
            Err(e) => outcome.error = Some(e.to_string()),
        }
        outcomes.push(outcome);
    }
    Ok(CycleResult {
        background,
        retrievals,
        outcomes,
        samples,
    })
}
