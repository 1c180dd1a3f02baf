//! Generative recomposition: decouple defects from a frame, place a stored
//! defect onto the clean background, and verify the label still matches
//! the pixels.
//!
//! The mock generator here is the label-preserving reference. Inpainting
//! fills the hole with the mean color of the ring around it; composition is
//! an alpha blend restricted to the placement box and the (feathered) mask.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mask_union, BinaryMask, BoundingBox, DefectCategory, Detection, ImageRef, RasterImage};
use crate::hash::{digest_parts, hex};
use crate::memory::{fit_scale, BackgroundTemplate, MemoryBank, MemoryEntry, Provenance};

/// Fraction of each side kept free of placements.
pub const PLACEMENT_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintJob {
    pub image: ImageRef,
    pub hole_mask: BinaryMask,
    pub dilation_radius: u32,
}

/// Hole mask = union of the instance masks, dilated by `radius`.
pub fn build_inpaint_job(
    image: &ImageRef,
    _detections: &[Detection],
    masks: &[BinaryMask],
    radius: u32,
) -> Result<InpaintJob> {
    if masks.is_empty() {
        return Err(Error::Empty("nothing to decouple"));
    }
    for m in masks {
        if m.dims() != image.dims() {
            return Err(Error::Shape {
                expected: image.dims(),
                found: m.dims(),
            });
        }
    }
    let hole_mask = mask_union(masks)?.dilate(radius);
    if hole_mask.is_empty() {
        return Err(Error::Empty("nothing to decouple"));
    }
    Ok(InpaintJob {
        image: image.clone(),
        hole_mask,
        dilation_radius: radius,
    })
}

fn mean_color(image: &RasterImage, select: impl Fn(u32, u32) -> bool) -> Option<[u8; 3]> {
    let mut sum = [0u64; 3];
    let mut n = 0u64;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if select(x, y) {
                let p = image.get(x, y);
                for c in 0..3 {
                    sum[c] += p[c] as u64;
                }
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum.map(|s| ((s + n / 2) / n) as u8))
}

/// Reference inpainting: hole pixels take the mean color of the ring of
/// width `dilation_radius + 2` around the hole; everything else is copied.
pub fn mock_inpaint(image: &RasterImage, job: &InpaintJob) -> Result<RasterImage> {
    if image.dims() != job.hole_mask.dims() {
        return Err(Error::Shape {
            expected: image.dims(),
            found: job.hole_mask.dims(),
        });
    }
    let hole = &job.hole_mask;
    let ring = hole.dilate(job.dilation_radius + 2).and_not(hole)?;
    let fill = mean_color(image, |x, y| ring.get(x, y))
        .or_else(|| mean_color(image, |_, _| true))
        .expect("images are never empty");
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if hole.get(x, y) {
                out.set(x, y, fill);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendSpec<'a> {
    pub background: &'a BackgroundTemplate,
    pub entry: &'a MemoryEntry,
    /// Integer-aligned target box for the entry's mask bounds.
    pub placement: BoundingBox,
    pub alpha: f64,
    pub feather: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendParams {
    pub alpha: f64,
    pub feather: u32,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self { alpha: 1.0, feather: 1 }
    }
}

/// Interior rectangle left after removing the placement margin.
pub fn margin_region(width: u32, height: u32) -> Option<BoundingBox> {
    let mx = libm::ceil(width as f64 * PLACEMENT_MARGIN);
    let my = libm::ceil(height as f64 * PLACEMENT_MARGIN);
    BoundingBox::new(mx, my, width as f64 - 2.0 * mx, height as f64 - 2.0 * my).ok()
}

/// Seeded placement of `entry` inside the background's margin rectangle.
pub fn plan_placement<'a>(
    background: &'a BackgroundTemplate,
    entry: &'a MemoryEntry,
    seed: u64,
    params: BlendParams,
) -> Result<BlendSpec<'a>> {
    if !(params.alpha > 0.0 && params.alpha <= 1.0) {
        return Err(Error::Config(alloc::format!("alpha {} outside (0, 1]", params.alpha)));
    }
    let infeasible = || Error::Infeasible(alloc::format!("entry {} does not fit background {}", entry.id, background.id));
    let (bw, bh) = background.pixels.dims();
    let region = margin_region(bw, bh).ok_or_else(infeasible)?;
    let (x0, y0, x1, y1) = entry.mask_bounds().ok_or_else(infeasible)?;
    let (mw, mh) = (x1 - x0, y1 - y0);
    let scale = fit_scale(mw, mh, &region).ok_or_else(infeasible)?;
    let pw = (libm::floor(mw as f64 * scale) as u32).max(1);
    let ph = (libm::floor(mh as f64 * scale) as u32).max(1);
    let (rx, ry) = (region.x as u32, region.y as u32);
    let (rw, rh) = (region.w as u32, region.h as u32);
    let rng_seed = digest_parts(&[background.id.as_bytes(), entry.id.as_bytes(), &seed.to_le_bytes()]);
    let mut rng = ChaCha8Rng::from_seed(rng_seed);
    let px = rx + rng.random_range(0..=rw - pw);
    let py = ry + rng.random_range(0..=rh - ph);
    Ok(BlendSpec {
        background,
        entry,
        placement: BoundingBox::new(px as f64, py as f64, pw as f64, ph as f64)?,
        alpha: params.alpha,
        feather: params.feather,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// Mask in image coordinates.
    pub mask: BinaryMask,
    pub category: DefectCategory,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub background_id: String,
    pub entry_ids: Vec<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub image: RasterImage,
    pub instances: Vec<Instance>,
    pub lineage: Lineage,
}

struct ScaledDefect {
    x: u32,
    y: u32,
    mask: BinaryMask,
    crop: RasterImage,
}

fn scale_defect(spec: &BlendSpec<'_>) -> Result<Option<ScaledDefect>> {
    let Some((x0, y0, x1, y1)) = spec.entry.mask_bounds() else {
        return Ok(None);
    };
    let (bw, bh) = spec.background.pixels.dims();
    spec.placement.check_within(bw, bh)?;
    let (px, py) = (spec.placement.x as u32, spec.placement.y as u32);
    let (pw, ph) = (spec.placement.w as u32, spec.placement.h as u32);
    if pw == 0 || ph == 0 {
        return Err(Error::InvalidBox {
            x: spec.placement.x,
            y: spec.placement.y,
            w: spec.placement.w,
            h: spec.placement.h,
        });
    }
    let mask = spec.entry.mask.crop(x0, y0, x1 - x0, y1 - y0)?.resize_nearest(pw, ph);
    let crop = spec.entry.crop_pixels.crop(x0, y0, x1 - x0, y1 - y0)?.resize_bilinear(pw, ph)?;
    Ok(Some(ScaledDefect { x: px, y: py, mask, crop }))
}

/// The instance label a composition of `spec` produces, in image coordinates.
pub fn composed_instance_mask(spec: &BlendSpec<'_>) -> Result<BinaryMask> {
    let (bw, bh) = spec.background.pixels.dims();
    match scale_defect(spec)? {
        Some(d) => d.mask.embed(bw, bh, d.x, d.y),
        None => Ok(BinaryMask::zeros(bw, bh)),
    }
}

/// Per-pixel blend weights: the mask box-filtered over `(2f+1)²` windows
/// (zero outside the placement box), scaled by `alpha`.
fn blend_weights(mask: &BinaryMask, feather: u32, alpha: f64) -> Vec<f64> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let f = feather as i64;
    let window = ((2 * f + 1) * (2 * f + 1)) as f64;
    let mut out = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let weight = if f == 0 {
                mask.get(x as u32, y as u32) as u8 as f64
            } else {
                let mut set = 0u32;
                for yy in (y - f).max(0)..(y + f + 1).min(h) {
                    for xx in (x - f).max(0)..(x + f + 1).min(w) {
                        set += mask.get(xx as u32, yy as u32) as u32;
                    }
                }
                set as f64 / window
            };
            out[(y * w + x) as usize] = alpha * weight;
        }
    }
    out
}

/// Reference composition Ψ: alpha blend of the scaled crop into the
/// placement box wherever the feathered mask is non-zero.
pub fn mock_compose(spec: &BlendSpec<'_>) -> Result<AugmentedSample> {
    let background = &spec.background.pixels;
    let lineage = Lineage {
        background_id: spec.background.id.clone(),
        entry_ids: vec![spec.entry.id.clone()],
        seed: spec.seed,
        notes: Vec::new(),
    };
    let Some(defect) = scale_defect(spec)? else {
        return Ok(AugmentedSample {
            image: background.clone(),
            instances: Vec::new(),
            lineage,
        });
    };
    let weights = blend_weights(&defect.mask, spec.feather, spec.alpha);
    let mut image = background.clone();
    let dw = defect.mask.width();
    for dy in 0..defect.mask.height() {
        for dx in 0..dw {
            let wgt = weights[(dy * dw + dx) as usize];
            if wgt <= 0.0 {
                continue;
            }
            let (x, y) = (defect.x + dx, defect.y + dy);
            let bg = background.get(x, y);
            let fg = defect.crop.get(dx, dy);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = bg[c] as f64 * (1.0 - wgt) + fg[c] as f64 * wgt;
                px[c] = libm::round(v).clamp(0.0, 255.0) as u8;
            }
            image.set(x, y, px);
        }
    }
    let (bw, bh) = background.dims();
    let mask = defect.mask.embed(bw, bh, defect.x, defect.y)?;
    let instances = if mask.is_empty() {
        Vec::new()
    } else {
        vec![Instance {
            mask,
            category: spec.entry.category,
            text: spec.entry.text.clone(),
        }]
    };
    Ok(AugmentedSample { image, instances, lineage })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyThresholds {
    pub max_leakage_px: u64,
    pub min_coverage: f64,
}

impl Default for ConsistencyThresholds {
    fn default() -> Self {
        Self {
            max_leakage_px: 0,
            min_coverage: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub consistent: bool,
    /// Changed pixels outside the feather-dilated union of instance masks.
    pub leakage_px: u64,
    /// Smallest per-instance coverage (1.0 when there are no instances).
    pub coverage: f64,
    pub per_instance_coverage: Vec<f64>,
}

/// Checks that every changed pixel is explained by a declared instance and
/// that every instance actually changed the image.
pub fn verify_label_consistency(
    sample: &AugmentedSample,
    background: &RasterImage,
    feather: u32,
    thresholds: ConsistencyThresholds,
) -> Result<ConsistencyReport> {
    let (w, h) = background.dims();
    if sample.image.dims() != (w, h) {
        return Err(Error::Shape {
            expected: (w, h),
            found: sample.image.dims(),
        });
    }
    let changed = BinaryMask::from_fn(w, h, |x, y| sample.image.get(x, y) != background.get(x, y));
    let mut allowed = BinaryMask::zeros(w, h);
    let mut per_instance_coverage = Vec::with_capacity(sample.instances.len());
    for inst in &sample.instances {
        allowed = allowed.or(&inst.mask)?;
        let area = inst.mask.count();
        let hit = changed.and(&inst.mask)?.count();
        per_instance_coverage.push(if area == 0 { 0.0 } else { hit as f64 / area as f64 });
    }
    let allowed = allowed.dilate(feather);
    let leakage_px = changed.and_not(&allowed)?.count();
    let coverage = per_instance_coverage.iter().copied().fold(1.0, f64::min);
    let consistent = leakage_px <= thresholds.max_leakage_px
        && per_instance_coverage.iter().all(|&c| c >= thresholds.min_coverage);
    Ok(ConsistencyReport {
        consistent,
        leakage_px,
        coverage,
        per_instance_coverage,
    })
}

/// Cuts an image-frame instance down to a memory entry: crop and mask are
/// the instance's tight bounds.
#[allow(clippy::too_many_arguments)]
pub fn entry_from_instance(
    id: String,
    image: &RasterImage,
    mask: &BinaryMask,
    category: DefectCategory,
    text: String,
    embed: &mut dyn FnMut(&RasterImage) -> Result<Vec<f32>>,
    provenance: Provenance,
    created_at: u64,
) -> Result<MemoryEntry> {
    if mask.dims() != image.dims() {
        return Err(Error::Shape {
            expected: image.dims(),
            found: mask.dims(),
        });
    }
    let (x0, y0, x1, y1) = mask.tight_bounds().ok_or(Error::Empty("instance mask"))?;
    let (cw, ch) = (x1 - x0, y1 - y0);
    let crop_pixels = image.crop(x0, y0, cw, ch)?;
    let embedding = embed(&crop_pixels)?;
    Ok(MemoryEntry {
        crop: ImageRef::new(id.clone(), alloc::format!("entries/{id}/crop.png"), cw, ch)?,
        id,
        crop_pixels,
        mask: mask.crop(x0, y0, cw, ch)?,
        category,
        text,
        embedding,
        provenance,
        created_at,
    })
}

/// Deterministic id for instance `index` of a synthetic sample.
pub fn synthetic_entry_id(lineage: &Lineage, index: usize) -> String {
    let mut parts: Vec<&[u8]> = vec![lineage.background_id.as_bytes()];
    for e in &lineage.entry_ids {
        parts.push(e.as_bytes());
    }
    let seed = lineage.seed.to_le_bytes();
    let idx = (index as u64).to_le_bytes();
    parts.push(&seed);
    parts.push(&idx);
    alloc::format!("syn-{}", &hex(&digest_parts(&parts))[..16])
}

/// Inserts one synthetic entry per instance. Re-archiving an identical
/// sample is a no-op that returns the same ids.
pub fn archive_synthetic(
    sample: &AugmentedSample,
    bank: &mut MemoryBank,
    embed: &mut dyn FnMut(&RasterImage) -> Result<Vec<f32>>,
    created_at: u64,
) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(sample.instances.len());
    for (i, inst) in sample.instances.iter().enumerate() {
        let id = synthetic_entry_id(&sample.lineage, i);
        let entry = entry_from_instance(
            id.clone(),
            &sample.image,
            &inst.mask,
            inst.category,
            inst.text.clone(),
            embed,
            Provenance::Synthetic,
            created_at,
        )?;
        match bank.get(&id) {
            Some(existing) if *existing == entry => {}
            _ => {
                bank.insert(entry)?;
            }
        }
        ids.push(id);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{tests::entry, QuerySpec};

    fn background(w: u32, h: u32) -> BackgroundTemplate {
        BackgroundTemplate {
            id: "bg".into(),
            image: ImageRef::new("bg", "bg.png", w, h).unwrap(),
            pixels: RasterImage::filled(w, h, [120, 120, 120]).unwrap(),
            embedding: vec![1.0, 0.0],
            provenance: Provenance::Real,
        }
    }

    #[test]
    fn inpaint_job_examples() {
        let img = ImageRef::new("i", "i.png", 8, 8).unwrap();
        let a = BinaryMask::from_fn(8, 8, |x, y| x == 1 && y == 1);
        let b = BinaryMask::from_fn(8, 8, |x, y| x == 6 && y == 5);
        let job = build_inpaint_job(&img, &[], &[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(job.hole_mask, a.or(&b).unwrap());
        let dil = build_inpaint_job(&img, &[], &[a], 1).unwrap();
        assert_eq!(dil.hole_mask, BinaryMask::from_fn(8, 8, |x, y| x <= 2 && y <= 2));
        assert_eq!(build_inpaint_job(&img, &[], &[], 1), Err(Error::Empty("nothing to decouple")));
    }

    #[test]
    fn mock_inpaint_examples() {
        let img = ImageRef::new("i", "i.png", 6, 6).unwrap();
        let mut raster = RasterImage::filled(6, 6, [10, 20, 30]).unwrap();
        raster.set(0, 0, [250, 250, 250]);
        let full = InpaintJob {
            image: img.clone(),
            hole_mask: BinaryMask::from_fn(6, 6, |_, _| true),
            dilation_radius: 0,
        };
        let out = mock_inpaint(&raster, &full).unwrap();
        let mean = [(10 * 35 + 250 + 18) / 36, (20 * 35 + 250 + 18) / 36, (30 * 35 + 250 + 18) / 36];
        assert!(out.as_bytes().chunks(3).all(|p| p == mean.map(|v| v as u8)));

        let hole = BinaryMask::from_fn(6, 6, |x, y| x == 3 && y == 3);
        raster.set(3, 3, [0, 0, 0]);
        let job = InpaintJob { image: img, hole_mask: hole, dilation_radius: 0 };
        let out = mock_inpaint(&raster, &job).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                if (x, y) != (3, 3) {
                    assert_eq!(out.get(x, y), raster.get(x, y));
                }
            }
        }
        // Ring of width 2 around (3,3) never reaches (0,0), so the fill is the flat color.
        assert_eq!(out.get(3, 3), [10, 20, 30]);
        assert_eq!(mock_inpaint(&raster, &job).unwrap(), out);
    }

    #[test]
    fn placement_examples() {
        let bg = background(100, 80);
        let e = entry("e", DefectCategory::Spalling, vec![1.0, 0.0], 20, 16);
        let a = plan_placement(&bg, &e, 7, BlendParams::default()).unwrap();
        let b = plan_placement(&bg, &e, 7, BlendParams::default()).unwrap();
        assert_eq!(a, b);
        let huge = entry("huge", DefectCategory::Spalling, vec![1.0, 0.0], 400, 300);
        assert!(matches!(plan_placement(&bg, &huge, 7, BlendParams::default()), Err(Error::Infeasible(_))));
    }

    #[test]
    fn empty_mask_composes_to_background() {
        let bg = background(40, 40);
        let mut e = entry("e", DefectCategory::Crack, vec![1.0, 0.0], 8, 8);
        e.mask = BinaryMask::zeros(8, 8);
        let spec = BlendSpec {
            background: &bg,
            entry: &e,
            placement: BoundingBox::new(4., 4., 8., 8.).unwrap(),
            alpha: 1.0,
            feather: 0,
            seed: 0,
        };
        let s = mock_compose(&spec).unwrap();
        assert_eq!(s.image, bg.pixels);
        assert!(s.instances.is_empty());
    }

    #[test]
    fn opaque_paste_copies_crop() {
        let bg = background(40, 40);
        let mut e = entry("e", DefectCategory::Crack, vec![1.0, 0.0], 8, 8);
        e.crop_pixels = RasterImage::new(8, 8, (0..8 * 8 * 3).map(|i| (i % 251) as u8).collect()).unwrap();
        let spec = BlendSpec {
            background: &bg,
            entry: &e,
            placement: BoundingBox::new(5., 6., 8., 8.).unwrap(),
            alpha: 1.0,
            feather: 0,
            seed: 0,
        };
        let s = mock_compose(&spec).unwrap();
        assert_eq!(s.image.crop(5, 6, 8, 8).unwrap(), e.crop_pixels);
        assert_eq!(s.instances[0].mask.count(), 64);
        let report = verify_label_consistency(&s, &bg.pixels, 0, ConsistencyThresholds::default()).unwrap();
        assert!(report.consistent);
    }

    #[test]
    fn verify_examples() {
        let bg = background(20, 20);
        let mask = BinaryMask::from_fn(20, 20, |x, y| (5..10).contains(&x) && (5..10).contains(&y));
        let mut sample = AugmentedSample {
            image: bg.pixels.clone(),
            instances: vec![Instance { mask, category: DefectCategory::Crack, text: String::new() }],
            lineage: Lineage { background_id: "bg".into(), entry_ids: vec![], seed: 0, notes: vec![] },
        };
        let r = verify_label_consistency(&sample, &bg.pixels, 1, ConsistencyThresholds::default()).unwrap();
        assert!(!r.consistent);
        assert_eq!(r.coverage, 0.0);

        for y in 5..10 {
            for x in 5..10 {
                sample.image.set(x, y, [0, 0, 0]);
            }
        }
        sample.image.set(15, 15, [1, 2, 3]);
        let r = verify_label_consistency(&sample, &bg.pixels, 1, ConsistencyThresholds::default()).unwrap();
        assert_eq!(r.leakage_px, 1);
        assert!(!r.consistent);
        // A change inside the feather band is not leakage.
        sample.image.set(15, 15, [120, 120, 120]);
        sample.image.set(10, 10, [1, 2, 3]);
        let r = verify_label_consistency(&sample, &bg.pixels, 1, ConsistencyThresholds::default()).unwrap();
        assert_eq!((r.leakage_px, r.consistent), (0, true));

        let small = RasterImage::filled(10, 10, [0, 0, 0]).unwrap();
        assert!(verify_label_consistency(&sample, &small, 1, ConsistencyThresholds::default()).is_err());
    }

    #[test]
    fn archive_examples() {
        let bg = background(64, 64);
        let e = entry("e", DefectCategory::RustStain, vec![1.0, 0.0], 12, 10);
        let spec = plan_placement(&bg, &e, 3, BlendParams::default()).unwrap();
        let sample = mock_compose(&spec).unwrap();
        let mut bank = MemoryBank::new(2);
        let mut embed = |_: &RasterImage| Ok(vec![0.0f32, 1.0]);
        let ids = archive_synthetic(&sample, &mut bank, &mut embed, 5).unwrap();
        assert_eq!(ids.len(), 1);
        let stored = bank.get(&ids[0]).unwrap();
        assert_eq!(stored.provenance, Provenance::Synthetic);
        let hit = bank
            .query_top_k(&QuerySpec {
                category: Some(DefectCategory::RustStain),
                embedding: vec![0.0, 1.0],
                k: 1,
                region: None,
            })
            .unwrap();
        assert_eq!(hit[0].0, stored);
        // Idempotent re-archive.
        assert_eq!(archive_synthetic(&sample, &mut bank, &mut embed, 5).unwrap(), ids);
        assert_eq!(bank.len(), 1);

        let empty = AugmentedSample { image: bg.pixels.clone(), instances: vec![], lineage: sample.lineage.clone() };
        assert!(archive_synthetic(&empty, &mut bank, &mut embed, 5).unwrap().is_empty());
    }
}
