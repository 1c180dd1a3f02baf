//! Synthetic facade fixtures: brick images with painted defects laid out by
//! the mock scene, ground-truth sidecars, a seed memory bank and the
//! matching experts/profile files.

use std::path::Path;

use facadefixer_core::geometry::{BinaryMask, BoundingBox, DefectCategory, RasterImage};
use facadefixer_core::memory::{MemoryBank, Provenance};
use facadefixer_core::mock::{rng_for, scene_objects};
use facadefixer_core::recompose::entry_from_instance;
use rand::Rng;
use serde_json::json;

use crate::bank_store::persist;
use crate::dataset::{write_item, Annotation, Sidecar, SidecarImage};
use crate::error::{write_json, Result};
use crate::gateway::{ExpertsConfig, Gateway};
use crate::recompose::embedder;

pub const FIXTURE_WIDTH: u32 = 256;
pub const FIXTURE_HEIGHT: u32 = 192;

fn category_color(c: DefectCategory) -> [u8; 3] {
    match c {
        DefectCategory::Crack => [38, 34, 32],
        DefectCategory::Spalling => [168, 160, 150],
        DefectCategory::RustStain => [150, 72, 30],
        DefectCategory::DegradedPlaster => [212, 206, 190],
        DefectCategory::Vegetation => [52, 110, 40],
        DefectCategory::Contaminant => [70, 70, 90],
    }
}

/// Defect footprint inside `b`: a wobbly stroke for cracks, an ellipse otherwise.
pub fn defect_mask(width: u32, height: u32, b: &BoundingBox, category: DefectCategory) -> BinaryMask {
    let (cx, cy) = b.center();
    if category == DefectCategory::Crack {
        let horizontal = b.w >= b.h;
        let (len, thick) = if horizontal { (b.w, b.h) } else { (b.h, b.w) };
        let half = (thick * 0.2).max(1.0);
        BinaryMask::from_fn(width, height, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px < b.x || px > b.right() || py < b.y || py > b.bottom() {
                return false;
            }
            let (along, across) = if horizontal { (px - b.x, py - cy) } else { (py - b.y, px - cx) };
            let wobble = (along / len * std::f64::consts::PI * 3.0).sin() * thick * 0.25;
            (across - wobble).abs() <= half
        })
    } else {
        let (rx, ry) = (b.w / 2.0, b.h / 2.0);
        BinaryMask::from_fn(width, height, |x, y| {
            let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            u * u + v * v <= 1.0
        })
    }
}

/// Brick wall texture seeded by `key`.
pub fn brick_wall(key: &str, width: u32, height: u32) -> RasterImage {
    let mut rng = rng_for(0, &[b"wall", key.as_bytes()]);
    let base = [
        rng.random_range(140..200u8),
        rng.random_range(70..110u8),
        rng.random_range(50..80u8),
    ];
    let mortar = [196u8, 190, 180];
    let course = rng.random_range(10..14u32);
    let brick = course * 2;
    let mut img = RasterImage::filled(width, height, base).expect("non-empty");
    for y in 0..height {
        let row = y / course;
        let offset = if row % 2 == 0 { 0 } else { brick / 2 };
        for x in 0..width {
            let joint = y % course == 0 || (x + offset) % brick == 0;
            let c = if joint { mortar } else { base };
            let n: i16 = rng.random_range(-14..=14);
            img.set(x, y, c.map(|v| (v as i16 + n).clamp(0, 255) as u8));
        }
    }
    img
}

fn paint(img: &mut RasterImage, mask: &BinaryMask, color: [u8; 3], key: &str) {
    let mut rng = rng_for(0, &[b"paint", key.as_bytes()]);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                let n: i16 = rng.random_range(-10..=10);
                img.set(x, y, color.map(|v| (v as i16 + n).clamp(0, 255) as u8));
            }
        }
    }
}

/// Renders image `id` with the defects of its mock scene and returns the
/// pixels with a ground-truth sidecar carrying boxes and masks.
pub fn render_facade(id: &str, width: u32, height: u32) -> (RasterImage, Sidecar) {
    let mut img = brick_wall(id, width, height);
    let mut instances = Vec::new();
    for (i, obj) in scene_objects(id, width, height).into_iter().enumerate() {
        let mask = defect_mask(width, height, &obj.bbox, obj.category);
        paint(&mut img, &mask, category_color(obj.category), &format!("{id}/{i}"));
        instances.push(Annotation {
            bbox: obj.bbox,
            category: obj.category,
            confidence: None,
            mask_rle: Some(mask.to_rle()),
        });
    }
    let sidecar = Sidecar {
        image: SidecarImage {
            id: id.into(),
            width,
            height,
        },
        instances,
    };
    (img, sidecar)
}

/// Two real entries per category, cut from small rendered patches. Shapes
/// are chosen to satisfy the placement fit rule on fixture-sized images.
pub fn seed_bank(gateway: &Gateway, created_at: u64) -> Result<MemoryBank> {
    let mut bank = MemoryBank::new(gateway.embedding_dim());
    let mut embed = embedder(gateway);
    for c in DefectCategory::ALL {
        for k in 0..2u32 {
            let key = format!("seed-{}-{k}", c.as_str());
            let (w, h) = if c == DefectCategory::Crack { (48.0, 22.0) } else { (36.0 + 4.0 * k as f64, 28.0) };
            let b = BoundingBox::new(8.0, 8.0, w, h)?;
            let mut patch = brick_wall(&key, 64, 44);
            let mask = defect_mask(64, 44, &b, c);
            paint(&mut patch, &mask, category_color(c), &key);
            let entry = entry_from_instance(
                key,
                &patch,
                &mask,
                c,
                format!("{} on brick, seed sample {k}", c.as_str()),
                &mut embed,
                Provenance::Real,
                created_at,
            )?;
            bank.insert(entry)?;
        }
    }
    Ok(bank)
}

/// Writes a complete fixture set into `dir`:
/// `dataset/`, `bank/`, `experts.json` and `profile.json`.
pub fn write_fixture_set(dir: &Path, images: usize, seed: u64) -> Result<()> {
    let dataset = dir.join("dataset");
    for i in 0..images {
        let id = format!("facade-{i:02}");
        let (img, sidecar) = render_facade(&id, FIXTURE_WIDTH, FIXTURE_HEIGHT);
        write_item(&dataset, &id, &img, &sidecar)?;
    }
    let experts = ExpertsConfig::all_mock(seed);
    write_json(&dir.join("experts.json"), &experts)?;
    let gateway = Gateway::with_http(experts)?;
    persist(&seed_bank(&gateway, 0)?, &dir.join("bank"))?;
    write_json(&dir.join("profile.json"), &fixture_profile(seed))
}

/// Profile enabling every toggle, with curation thresholds sized for
/// fixture images.
pub fn fixture_profile(seed: u64) -> serde_json::Value {
    json!({
        "toggles": ["detect", "segment", "recompose", "curate", "evaluate"],
        "detection_strategy": "adjudicated",
        "segmentation_prompt_policy": "adjudicated",
        "seed": seed,
        "dataset": "dataset",
        "curation": { "min_side": 128 },
    })
}
