//! Bodies of the pipeline stages. Each takes the outputs of the stages
//! already done and returns its own output as JSON, plus the ids it
//! contributes to the artifact index.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use facadefixer_core::adjudication::{
    build_request, CandidatePayload, CandidateSet, Verdict, DETECTION_FALLBACK, SEGMENTATION_FALLBACK,
};
use facadefixer_core::fusion::{crack_mask_union, fuse_intersection, fuse_union, ExpertOutput, ExpertPayload};
use facadefixer_core::geometry::{clip_mask_to_boxes, mask_union, BinaryMask, DefectCategory, Detection, ImageRef};
use facadefixer_core::hash::{digest_parts, hex};
use facadefixer_core::memory::{BackgroundTemplate, Provenance};
use facadefixer_core::plan::{DetectionStrategy, PromptPolicy, TaskKind};
use facadefixer_core::prompt::{PromptMode, SegmentPrompt};
use facadefixer_core::recompose::{archive_synthetic, entry_from_instance, AugmentedSample, ConsistencyReport, Instance, Lineage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::RunContext;
use crate::curate::{curate, write_manifest};
use crate::dataset::DatasetItem;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_frames, write_table};
use crate::gateway::ExpertKind;
use crate::imageio::{read_png, write_png};
use crate::recompose::{self as rc, embedder, sample_id, write_sample, Retrieval};

pub(crate) struct NodeOutcome {
    pub output: Value,
    pub artifacts: Vec<String>,
    pub summary: Value,
}

fn outcome<T: Serialize>(output: &T, artifacts: Vec<String>, summary: Value) -> Result<NodeOutcome> {
    Ok(NodeOutcome {
        output: serde_json::to_value(output).map_err(|e| Error::Config(e.to_string()))?,
        artifacts,
        summary,
    })
}

fn input<T: DeserializeOwned>(done: &BTreeMap<TaskKind, Value>, kind: TaskKind) -> Result<T> {
    let v = done
        .get(&kind)
        .ok_or_else(|| Error::Config(format!("output of {kind} is not available")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("{kind} checkpoint: {e}")))
}

fn item<'a>(ctx: &'a RunContext<'_>, image_id: &str) -> Result<&'a DatasetItem> {
    ctx.dataset
        .iter()
        .find(|i| i.id() == image_id)
        .ok_or_else(|| Error::Config(format!("image {image_id} is not in the dataset")))
}

pub(crate) fn run(kind: TaskKind, ctx: &RunContext<'_>, done: &BTreeMap<TaskKind, Value>) -> Result<NodeOutcome> {
    match kind {
        TaskKind::Curate => curate_node(ctx),
        TaskKind::Detect => detect_node(ctx),
        TaskKind::Segment => segment_node(ctx, done),
        TaskKind::Inpaint => inpaint_node(ctx, done),
        TaskKind::Retrieve => retrieve_node(ctx, done),
        TaskKind::Compose => compose_node(ctx, done),
        TaskKind::Verify => verify_node(ctx, done),
        TaskKind::Archive => archive_node(ctx, done),
        TaskKind::Evaluate => evaluate_node(ctx, done),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectImage {
    pub image_id: String,
    pub experts: BTreeMap<String, Vec<Detection>>,
    pub union: Vec<Detection>,
    pub intersection: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    /// Label of the candidate set handed downstream.
    pub selected_label: String,
    pub selected: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectOutput {
    pub strategy: DetectionStrategy,
    pub images: Vec<DetectImage>,
}

fn detections_of(o: &ExpertOutput) -> &[Detection] {
    match &o.payload {
        ExpertPayload::Detections(d) => d,
        ExpertPayload::Mask(_) => &[],
    }
}

fn detect_node(ctx: &RunContext<'_>) -> Result<NodeOutcome> {
    let detectors = ctx.gateway.experts_of(ExpertKind::Detector);
    if detectors.is_empty() {
        return Err(crate::gateway::GatewayError::Missing(ExpertKind::Detector).into());
    }
    let profile = &ctx.config.profile;
    let fusion = &ctx.config.settings.fusion;
    let mut images = Vec::with_capacity(ctx.dataset.len());
    let mut artifacts = Vec::new();
    let mut verdicts: BTreeMap<String, usize> = BTreeMap::new();
    for it in ctx.dataset {
        let image = it.image_ref()?;
        let pixels = it.load_image()?;
        let mut outputs = Vec::with_capacity(detectors.len());
        let mut warnings = Vec::new();
        for d in &detectors {
            let reply = ctx.gateway.call_detector(&image, &pixels, d)?;
            warnings.extend(reply.warnings);
            let kept: Vec<Detection> = detections_of(&reply.output)
                .iter()
                .filter(|x| profile.categories.contains(&x.category))
                .cloned()
                .collect();
            outputs.push(ExpertOutput::detections(d.id.clone(), image.id.clone(), kept));
        }
        let union = fuse_union(&outputs, fusion)?;
        let intersection = fuse_intersection(&outputs, fusion)?;
        let (verdict, selected_label, selected) = match profile.detection_strategy {
            DetectionStrategy::Union => (None, "union".to_string(), union.clone()),
            DetectionStrategy::Intersection => (None, "intersection".to_string(), intersection.clone()),
            DetectionStrategy::Adjudicated => {
                let mut candidates: Vec<CandidateSet> = outputs
                    .iter()
                    .map(|o| CandidateSet::new(o.expert.clone(), CandidatePayload::Detections(detections_of(o).to_vec())))
                    .collect();
                candidates.push(CandidateSet::new("union", CandidatePayload::Detections(union.clone())));
                candidates.push(CandidateSet::new("intersection", CandidatePayload::Detections(intersection.clone())));
                let request = build_request(
                    image.clone(),
                    candidates,
                    "Choose the candidate detection set that most plausibly covers every facade defect in the image.",
                )?;
                let verdict = ctx.gateway.adjudicate(&request, DETECTION_FALLBACK)?;
                let chosen = match &request.candidate(&verdict.chosen).map(|c| &c.payload) {
                    Some(CandidatePayload::Detections(d)) => d.clone(),
                    _ => return Err(Error::Config(format!("verdict names unusable label {}", verdict.chosen))),
                };
                *verdicts.entry(format!("{:?}", verdict.source).to_lowercase()).or_default() += 1;
                (Some(verdict.clone()), verdict.chosen, chosen)
            }
        };
        artifacts.extend((0..selected.len()).map(|i| format!("detection:{}:{i}", image.id)));
        images.push(DetectImage {
            image_id: image.id.clone(),
            experts: outputs
                .iter()
                .map(|o| (o.expert.clone(), detections_of(o).to_vec()))
                .collect(),
            union,
            intersection,
            verdict,
            selected_label,
            selected,
            warnings,
        });
    }
    let summary = json!({
        "images": images.len(),
        "detections": images.iter().map(|i| i.selected.len()).sum::<usize>(),
        "verdicts": verdicts,
    });
    outcome(
        &DetectOutput {
            strategy: profile.detection_strategy,
            images,
        },
        artifacts,
        summary,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegInstance {
    pub detection: Detection,
    pub mask: BinaryMask,
    /// Prompt mode (or crack union) that produced the mask.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentImage {
    pub image_id: String,
    pub instances: Vec<SegInstance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutput {
    pub policy: PromptPolicy,
    pub images: Vec<SegmentImage>,
}

fn prompt_modes(policy: PromptPolicy) -> Vec<PromptMode> {
    match policy {
        PromptPolicy::Bbox => vec![PromptMode::Bbox],
        PromptPolicy::Points => vec![PromptMode::Points],
        PromptPolicy::Text => vec![PromptMode::Text],
        PromptPolicy::Adjudicated => PromptMode::ALL.to_vec(),
    }
}

fn crack_mask(ctx: &RunContext<'_>, image: &ImageRef, pixels: &facadefixer_core::geometry::RasterImage) -> Result<BinaryMask> {
    let segmenters = ctx.gateway.experts_of(ExpertKind::CrackSegmenter);
    if segmenters.is_empty() {
        return Err(crate::gateway::GatewayError::Missing(ExpertKind::CrackSegmenter).into());
    }
    let mut outputs = Vec::with_capacity(segmenters.len());
    for d in segmenters {
        let m = ctx.gateway.call_segmenter(image, pixels, None, d)?;
        outputs.push(ExpertOutput::mask(d.id.clone(), image.id.clone(), m));
    }
    Ok(crack_mask_union(&outputs)?)
}

fn segment_node(ctx: &RunContext<'_>, done: &BTreeMap<TaskKind, Value>) -> Result<NodeOutcome> {
    let detect: DetectOutput = input(done, TaskKind::Detect)?;
    let policy = ctx.config.profile.segmentation_prompt_policy;
    let modes = prompt_modes(policy);
    let mut images = Vec::with_capacity(detect.images.len());
    let mut artifacts = Vec::new();
    for di in &detect.images {
        let it = item(ctx, &di.image_id)?;
        let image = it.image_ref()?;
        let pixels = it.load_image()?;
        let mut cracks: Option<BinaryMask> = None;
        let mut instances = Vec::new();
        let mut notes = Vec::new();
        for (i, det) in di.selected.iter().enumerate() {
            let (mask, source, verdict) = if det.category == DefectCategory::Crack {
                if cracks.is_none() {
                    cracks = Some(crack_mask(ctx, &image, &pixels)?);
                }
                let m = clip_mask_to_boxes(cracks.as_ref().expect("just set"), &[det.bbox])?;
                (m, "crack-union".to_string(), None)
            } else {
                let promptable = ctx.gateway.first_of(ExpertKind::PromptableSegmenter)?;
                let mut candidates = Vec::with_capacity(modes.len());
                for &mode in &modes {
                    let prompt = SegmentPrompt::for_detection(mode, &det.bbox, det.category);
                    let raw = ctx.gateway.call_segmenter(&image, &pixels, Some(&prompt), promptable)?;
                    let anchored = clip_mask_to_boxes(&raw, &[det.bbox])?;
                    candidates.push(CandidateSet::new(mode.label(), CandidatePayload::Masks(vec![anchored])));
                }
                if candidates.len() == 1 {
                    let c = candidates.pop().expect("one candidate");
                    let CandidatePayload::Masks(mut m) = c.payload else { unreachable!() };
                    (m.pop().expect("one mask"), c.label, None)
                } else {
                    let request = build_request(
                        image.clone(),
                        candidates,
                        &format!(
                            "Choose the mask that best delineates the {} inside its detection box.",
                            det.category
                        ),
                    )?;
                    let verdict = ctx.gateway.adjudicate(&request, SEGMENTATION_FALLBACK)?;
                    let mask = match request.candidate(&verdict.chosen).map(|c| &c.payload) {
                        Some(CandidatePayload::Masks(m)) => m[0].clone(),
                        _ => return Err(Error::Config(format!("verdict names unusable label {}", verdict.chosen))),
                    };
                    (mask, verdict.chosen.clone(), Some(verdict))
                }
            };
            if mask.is_empty() {
                notes.push(format!("detection {i} ({}) produced an empty mask", det.category));
                continue;
            }
            artifacts.push(format!("mask:{}:{i}", di.image_id));
            instances.push(SegInstance {
                detection: det.clone(),
                mask,
                source,
                verdict,
            });
        }
        images.push(SegmentImage {
            image_id: di.image_id.clone(),
            instances,
            notes,
        });
    }
    let summary = json!({
        "images": images.len(),
        "instances": images.iter().map(|i| i.instances.len()).sum::<usize>(),
    });
    outcome(&SegmentOutput { policy, images }, artifacts, summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRecord {
    pub image_id: String,
    pub background_id: String,
    /// PNG path relative to the run directory.
    pub file: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintOutput {
    pub backgrounds: Vec<BackgroundRecord>,
    /// Images without instances, which have nothing to decouple.
    pub untouched: Vec<String>,
}

fn load_background(run_dir: &Path, rec: &BackgroundRecord) -> Result<BackgroundTemplate> {
    let pixels = read_png(&run_dir.join(&rec.file))?;
    let (w, h) = pixels.dims();
    Ok(BackgroundTemplate {
        id: rec.background_id.clone(),
        image: ImageRef::new(rec.background_id.clone(), format!("backgrounds/{}/image.png", rec.background_id), w, h)?,
        pixels,
        embedding: rec.embedding.clone(),
        provenance: Provenance::Real,
    })
}

fn inpaint_node(ctx: &RunContext<'_>, done: &BTreeMap<TaskKind, Value>) -> Result<NodeOutcome> {
    let seg: SegmentOutput = input(done, TaskKind::Segment)?;
    let radius = ctx.config.settings.recompose.dilation_radius;
    let mut backgrounds = Vec::new();
    let mut untouched = Vec::new();
    for si in &seg.images {
        if si.instances.is_empty() {
            untouched.push(si.image_id.clone());
            continue;
        }
        let it = item(ctx, &si.image_id)?;
        let masks: Vec<BinaryMask> = si.instances.iter().map(|i| i.mask.clone()).collect();
        let bg = rc::decouple(ctx.gateway, &it.image_ref()?, &it.load_image()?, &masks, radius, ctx.seed)?;
        let file = format!("artifacts/backgrounds/{}.png", bg.id);
        write_png(&ctx.run_dir.join(&file), &bg.pixels)?;
        backgrounds.push(BackgroundRecord {
            image_id: si.image_id.clone(),
            background_id: bg.id,
            file,
            embedding: bg.embedding,
        });
    }
    let artifacts = backgrounds.iter().map(|b| b.background_id.clone()).collect();
    let summary = json!({ "backgrounds": backgrounds.len(), "untouched": untouched.len() });
    outcome(&InpaintOutput { backgrounds, untouched }, artifacts, summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRecord {
    pub background_id: String,
    pub picks: Vec<Retrieval>,
}

fn retrieve_node(ctx: &RunContext<'_>, done: &BTreeMap<TaskKind, Value>) -> Result<NodeOutcome> {
    let inpaint: InpaintOutput = input(done, TaskKind::Inpaint)?;
    let mut records = Vec::with_capacity(inpaint.backgrounds.len());
    for rec in &inpaint.backgrounds {
        let bg = load_background(ctx.run_dir, rec)?;
        let picks = rc::retrieve(&ctx.bank.read(), &bg, &ctx.config.profile.categories)?;
        records.push(RetrieveRecord {
            background_id: rec.background_id.clone(),
            picks,
        });
    }
    let found: BTreeSet<String> = records
        .iter()
        .flat_map(|r| r.picks.iter().filter_map(|p| p.entry_id.clone()))
        .collect();
    let misses = records
        .iter()
        .flat_map(|r| &r.picks)
        .filter(|p| p.entry_id.is_none())
        .count();
    let summary = json!({ "retrieved": found.len(), "no_compatible_entry": misses });
    outcome(&records, found.into_iter().collect(), summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub background_id: String,
    pub entry_id: String,
    pub category: DefectCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    /// PNG path relative to the run directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
    #[serde(default)]
    pub instances: Vec<Instance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn compose_node(ctx: &RunContext<'_>, done: &BTreeMap<TaskKind, Value>) -> Result<NodeOutcome> {
    let inpaint: InpaintOutput = input(done, TaskKind::Inpaint)?;
    let retrieved: Vec<RetrieveRecord> = input(done, TaskKind::Retrieve)?;
    let blend = ctx.config.settings.recompose.blend;
    let mut samples = Vec::new();
    for r in &retrieved {
        let rec = inpaint
            .backgrounds
            .iter()
            .find(|b| b.background_id == r.background_id)
            .ok_or_else(|| Error::Config(format!("background {} missing from inpaint output", r.background_id)))?;
        let bg = load_background(ctx.run_dir, rec)?;
        for pick in &r.picks {
            let Some(entry_id) = &pick.entry_id else { continue };
            let mut record = SampleRecord {
                background_id: bg.id.clone(),
                entry_id: entry_id.clone(),
                category: pick.category,
                sample_id: None,
                file: None,
                lineage: None,
                instances: Vec::new(),
                error: None,
            };
            let entry = ctx.bank.read().get(entry_id).cloned();
            let composed = match entry {
                Some(e) => rc::compose(ctx.gateway, &bg, &e, ctx.seed, blend),
                None => Err(Error::Config(format!("entry {entry_id} is no longer in the bank"))),
            };
            match composed {
                Ok(sample) => {
                    let id = sample_id(&sample.lineage);
                    write_sample(&ctx.run_dir.join("artifacts/samples"), &id, &sample)?;
                    record.file = Some(format!("artifacts/samples/{id}.png"));
                    record.sample_id = Some(id);
                    record.lineage = Some(sample.lineage);
                    record.instances = sample.instances;
                }
                Err(e) => record.error = Some(e.to_string()),
            }
            samples.push(record);
        }
    }
    let artifacts = samples.iter().filter_map(|s| s.sample_id.clone()).collect();
    let summary = json!({
        "samples": samples.iter().filter(|s| s.sample_id.is_some()).count(),
        "errors": samples.iter().filter(|s| s.error.is_some()).count(),
    });
    outcome(&samples, artifacts, summary)
}

fn load_sample(run_dir: &Path, rec: &SampleRecord) -> Result<Option<AugmentedSample>> {
    let (Some(file), Some(lineage)) = (&rec.file, &rec.lineage) else {
        return Ok(None);
    };
    Ok(Some(AugmentedSample {
        image: read_png(&run_dir.join(file))?,
        instances: rec.instances.clone(),
        lineage: lineage.clone(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub sample_id: String,
    pub report: ConsistencyReport,
}

fn verify_node(ctx: &RunContext<'_>, done: &BTreeMap<TaskKind, Value>) -> Result<NodeOutcome> {
    let inpaint: InpaintOutput = input(done, TaskKind::Inpaint)?;
    let samples: Vec<SampleRecord> = input(done, TaskKind::Compose)?;
    let mut reports = Vec::new();
    for rec in &samples {
        let (Some(id), Some(sample)) = (&rec.sample_id, load_sample(ctx.run_dir, rec)?) else {
            continue;
        };
        let bg_rec = inpaint
            .backgrounds
            .iter()
            .find(|b| b.background_id == rec.background_id)
            .ok_or_else(|| Error::Config(format!("background {} missing", rec.background_id)))?;
        let bg = load_background(ctx.run_dir, bg_rec)?;
        reports.push(VerifyRecord {
            sample_id: id.clone(),
            report: rc::verify(&sample, &bg, &ctx.config.settings.recompose)?,
        });
    }
    let consistent: Vec<String> = reports
        .iter()
        .filter(|r| r.report.consistent)
        .map(|r| r.sample_id.clone())
        .collect();
    let summary = json!({ "verified": reports.len(), "consistent": consistent.len() });
    outcome(&reports, consistent, summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveOutput {
    pub real: Vec<String>,
    pub synthetic: Vec<String>,
    pub backgrounds: Vec<String>,
    /// Samples withheld because verification failed.
    pub rejected: Vec<String>,
}

fn real_entry_id(image_id: &str, index: usize, mask: &BinaryMask) -> String {
    let rle = mask.to_rle().to_coco_string();
    let idx = (index as u64).to_le_bytes();
    format!("real-{}", &hex(&digest_parts(&[image_id.as_bytes(), &idx, rle.as_bytes()]))[..16])
}

fn archive_node(ctx: &RunContext<'_>, done: &BTreeMap<TaskKind, Value>) -> Result<NodeOutcome> {
    let seg: SegmentOutput = input(done, TaskKind::Segment)?;
    let inpaint: InpaintOutput = input(done, TaskKind::Inpaint)?;
    let samples: Vec<SampleRecord> = input(done, TaskKind::Compose)?;
    let reports: Vec<VerifyRecord> = input(done, TaskKind::Verify)?;
    let consistent: BTreeSet<&str> = reports
        .iter()
        .filter(|r| r.report.consistent)
        .map(|r| r.sample_id.as_str())
        .collect();
    let created_at = ctx.config.settings.recompose.created_at;

    let mut real_entries = Vec::new();
    let mut embed = embedder(ctx.gateway);
    for si in &seg.images {
        if si.instances.is_empty() {
            continue;
        }
        let pixels = item(ctx, &si.image_id)?.load_image()?;
        for (i, inst) in si.instances.iter().enumerate() {
            let id = real_entry_id(&si.image_id, i, &inst.mask);
            let text = format!("{} segmented on {}", inst.detection.category, si.image_id);
            real_entries.push(entry_from_instance(
                id,
                &pixels,
                &inst.mask,
                inst.detection.category,
                text,
                &mut embed,
                Provenance::Real,
                created_at,
            )?);
        }
    }
    let mut to_archive = Vec::new();
    let mut rejected = Vec::new();
    for rec in &samples {
        let Some(id) = &rec.sample_id else { continue };
        if consistent.contains(id.as_str()) {
            if let Some(s) = load_sample(ctx.run_dir, rec)? {
                to_archive.push(s);
            }
        } else {
            rejected.push(id.clone());
        }
    }
    let used_backgrounds: BTreeSet<&str> = to_archive.iter().map(|s| s.lineage.background_id.as_str()).collect();
    let mut bgs = Vec::new();
    for rec in &inpaint.backgrounds {
        if used_backgrounds.contains(rec.background_id.as_str()) {
            bgs.push(load_background(ctx.run_dir, rec)?);
        }
    }

    let output = ctx.bank.update(|bank| {
        let mut real = Vec::new();
        for e in real_entries {
            match bank.get(&e.id) {
                Some(existing) if *existing == e => {}
                _ => {
                    bank.insert(e.clone())?;
                }
            }
            real.push(e.id);
        }
        let mut backgrounds = Vec::new();
        for bg in bgs {
            if bank.background(&bg.id).is_none() {
                bank.insert_background(bg.clone())?;
            }
            backgrounds.push(bg.id);
        }
        let mut synthetic = Vec::new();
        let mut embed = embedder(ctx.gateway);
        for s in &to_archive {
            synthetic.extend(archive_synthetic(s, bank, &mut embed, created_at)?);
        }
        Ok(ArchiveOutput {
            real,
            synthetic,
            backgrounds,
            rejected,
        })
    })?;
    let artifacts = output.real.iter().chain(&output.synthetic).cloned().collect();
    let summary = json!({
        "real": output.real.len(),
        "synthetic": output.synthetic.len(),
        "backgrounds": output.backgrounds.len(),
        "rejected": output.rejected.len(),
    });
    outcome(&output, artifacts, summary)
}

fn curate_node(ctx: &RunContext<'_>) -> Result<NodeOutcome> {
    let manifest = curate(ctx.dataset, &ctx.config.settings.curation, ctx.gateway)?;
    write_manifest(&ctx.run_dir.join("artifacts/curation"), &manifest)?;
    let summary = json!({ "kept": manifest.kept.len(), "dropped": manifest.dropped.len() });
    outcome(&manifest, manifest.kept.clone(), summary)
}

fn evaluate_node(ctx: &RunContext<'_>, done: &BTreeMap<TaskKind, Value>) -> Result<NodeOutcome> {
    let detect: Option<DetectOutput> = done.contains_key(&TaskKind::Detect).then(|| input(done, TaskKind::Detect)).transpose()?;
    let seg: Option<SegmentOutput> = done.contains_key(&TaskKind::Segment).then(|| input(done, TaskKind::Segment)).transpose()?;
    let mut frames = Vec::with_capacity(ctx.dataset.len());
    for it in ctx.dataset {
        let gt = &it.sidecar;
        let mut f = crate::evaluate::frame(gt, None)?;
        if let Some(d) = &detect {
            if let Some(di) = d.images.iter().find(|i| i.image_id == gt.image.id) {
                f.predictions = di.selected.clone();
            }
        }
        match &seg {
            Some(s) => {
                if let Some(si) = s.images.iter().find(|i| i.image_id == gt.image.id) {
                    let mut by_class: BTreeMap<DefectCategory, Vec<BinaryMask>> = BTreeMap::new();
                    for inst in &si.instances {
                        by_class.entry(inst.detection.category).or_default().push(inst.mask.clone());
                    }
                    for (c, masks) in by_class {
                        f.pred_masks.insert(c, mask_union(&masks)?);
                    }
                }
            }
            None => f.gt_masks = None,
        }
        frames.push(f);
    }
    let table = evaluate_frames(&frames)?;
    write_table(&ctx.run_dir.join("artifacts/metrics.json"), &table)?;
    let summary = serde_json::to_value(&table).map_err(|e| Error::Config(e.to_string()))?;
    outcome(&table, vec!["metrics.json".into(), "metrics.csv".into()], summary)
}
