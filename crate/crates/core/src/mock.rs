//! Seeded stand-ins for the external experts.
//!
//! Every mock is a pure function of its seed and the identity of its input.
//! Detectors and segmenters share a hidden per-image scene layout derived
//! from the image id, so independent mock experts agree on roughly the same
//! objects while disagreeing in jitter, misses and spurious boxes.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{BinaryMask, BoundingBox, DefectCategory, Detection, ImageRef};
use crate::hash::digest_parts;
use crate::prompt::{prompt_map, SegmentPrompt};

pub fn rng_for(seed: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut all: Vec<&[u8]> = Vec::with_capacity(parts.len() + 1);
    let seed_bytes = seed.to_le_bytes();
    all.push(&seed_bytes);
    all.extend_from_slice(parts);
    ChaCha8Rng::from_seed(digest_parts(&all))
}

/// A defect in the hidden scene layout of a mock image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub bbox: BoundingBox,
    pub category: DefectCategory,
}

/// The 1–3 defects a mock world places in image `image_id`. Boxes are
/// integer-aligned and non-overlapping.
pub fn scene_objects(image_id: &str, width: u32, height: u32) -> Vec<SceneObject> {
    let mut rng = rng_for(0, &[b"scene", image_id.as_bytes()]);
    let count = rng.random_range(1..=3usize);
    let mut objects: Vec<SceneObject> = Vec::new();
    let (w, h) = (width as f64, height as f64);
    for _ in 0..count * 8 {
        if objects.len() == count {
            break;
        }
        let category = DefectCategory::ALL[rng.random_range(0..DefectCategory::ALL.len())];
        let (bw, bh) = if category == DefectCategory::Crack {
            if rng.random_bool(0.5) {
                (rng.random_range(0.25..0.45) * w, rng.random_range(0.06..0.12) * h)
            } else {
                (rng.random_range(0.06..0.12) * w, rng.random_range(0.25..0.45) * h)
            }
        } else {
            (rng.random_range(0.12..0.3) * w, rng.random_range(0.12..0.3) * h)
        };
        let (bw, bh) = (libm::floor(bw).max(4.0), libm::floor(bh).max(4.0));
        if bw + 2.0 >= w || bh + 2.0 >= h {
            continue;
        }
        let x = libm::floor(rng.random_range(1.0..w - bw - 1.0));
        let y = libm::floor(rng.random_range(1.0..h - bh - 1.0));
        let Ok(bbox) = BoundingBox::new(x, y, bw, bh) else { continue };
        if objects.iter().any(|o| o.bbox.intersection_area(&bbox) > 0.0) {
            continue;
        }
        objects.push(SceneObject { bbox, category });
    }
    objects
}

/// Mock detector: jittered scene objects, occasional misses and one
/// possible spurious box. Boxes are clamped to the image.
pub fn mock_detect(seed: u64, expert: &str, image: &ImageRef) -> Vec<Detection> {
    let mut rng = rng_for(seed, &[b"detect", image.id.as_bytes()]);
    let mut out = Vec::new();
    for obj in scene_objects(&image.id, image.width, image.height) {
        if rng.random_bool(0.15) {
            continue;
        }
        let b = obj.bbox;
        let jitter = |rng: &mut ChaCha8Rng, span: f64| libm::round(rng.random_range(-0.06..0.06) * span);
        let x = b.x + jitter(&mut rng, b.w);
        let y = b.y + jitter(&mut rng, b.h);
        let w = b.w + jitter(&mut rng, b.w);
        let h = b.h + jitter(&mut rng, b.h);
        let confidence = libm::round(rng.random_range(0.45..0.98) * 1000.0) / 1000.0;
        if let Some(bbox) = BoundingBox::new(x, y, w, h).ok().and_then(|bx| bx.clamp_to(image.width, image.height)) {
            out.push(Detection {
                bbox,
                category: obj.category,
                confidence,
                source: expert.into(),
            });
        }
    }
    if rng.random_bool(0.3) {
        let (w, h) = (image.width as f64, image.height as f64);
        let bw = libm::floor(rng.random_range(0.08..0.2) * w).max(2.0);
        let bh = libm::floor(rng.random_range(0.08..0.2) * h).max(2.0);
        let x = libm::floor(rng.random_range(0.0..(w - bw).max(1.0)));
        let y = libm::floor(rng.random_range(0.0..(h - bh).max(1.0)));
        let category = DefectCategory::ALL[rng.random_range(0..DefectCategory::ALL.len())];
        let confidence = libm::round(rng.random_range(0.2..0.6) * 1000.0) / 1000.0;
        if let Some(bbox) = BoundingBox::new(x, y, bw, bh).ok().and_then(|bx| bx.clamp_to(image.width, image.height)) {
            out.push(Detection {
                bbox,
                category,
                confidence,
                source: expert.into(),
            });
        }
    }
    out
}

fn ellipse_in(width: u32, height: u32, b: &BoundingBox, shrink: f64, dx: f64, dy: f64) -> BinaryMask {
    let (cx, cy) = b.center();
    let (cx, cy) = (cx + dx * b.w, cy + dy * b.h);
    let (rx, ry) = (b.w * shrink / 2.0, b.h * shrink / 2.0);
    let (x0, y0, x1, y1) = b.pixel_span();
    BinaryMask::from_fn(width, height, |x, y| {
        let (xi, yi) = (x as i64, y as i64);
        if xi < x0 || xi >= x1 || yi < y0 || yi >= y1 {
            return false;
        }
        let u = (x as f64 + 0.5 - cx) / rx;
        let v = (y as f64 + 0.5 - cy) / ry;
        u * u + v * v <= 1.0
    })
}

fn prompt_identity(prompt: &SegmentPrompt) -> Vec<u8> {
    serde_json::to_vec(prompt).unwrap_or_default()
}

/// Mock promptable segmenter. A box prompt yields an ellipse inside the box,
/// a point prompt a disc around the point, a text prompt ellipses over the
/// scene objects whose mapped concepts match.
pub fn mock_segment(seed: u64, image: &ImageRef, prompt: &SegmentPrompt) -> BinaryMask {
    let ident = prompt_identity(prompt);
    let mut rng = rng_for(seed, &[b"segment", image.id.as_bytes(), &ident]);
    let (w, h) = image.dims();
    let mut mask = BinaryMask::zeros(w, h);
    match prompt {
        SegmentPrompt::Bbox { boxes } => {
            for b in boxes {
                let Some(b) = b.clamp_to(w, h) else { continue };
                let shrink = rng.random_range(0.75..1.0);
                let (dx, dy) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                mask = mask.or(&ellipse_in(w, h, &b, shrink, dx, dy)).expect("same frame");
            }
        }
        SegmentPrompt::Points { points } => {
            for &[px, py] in points {
                let r = rng.random_range(0.04..0.1) * w.min(h) as f64;
                let disc = BinaryMask::from_fn(w, h, |x, y| {
                    let (u, v) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
                    u * u + v * v <= r * r
                });
                mask = mask.or(&disc).expect("same frame");
            }
        }
        SegmentPrompt::Text { concepts } => {
            for obj in scene_objects(&image.id, w, h) {
                let matches = prompt_map(obj.category).iter().any(|c| concepts.iter().any(|q| q == c));
                if matches && !rng.random_bool(0.1) {
                    let shrink = rng.random_range(0.8..1.0);
                    mask = mask.or(&ellipse_in(w, h, &obj.bbox, shrink, 0.0, 0.0)).expect("same frame");
                }
            }
        }
    }
    mask
}

/// Mock crack segmenter: a thin stroke along each crack's long axis, with
/// seeded gaps so that different experts fragment differently.
pub fn mock_crack_segment(seed: u64, image: &ImageRef) -> BinaryMask {
    let mut rng = rng_for(seed, &[b"crack", image.id.as_bytes()]);
    let (w, h) = image.dims();
    let mut mask = BinaryMask::zeros(w, h);
    for obj in scene_objects(&image.id, w, h) {
        if obj.category != DefectCategory::Crack {
            continue;
        }
        let b = obj.bbox;
        let horizontal = b.w >= b.h;
        let (len, thick) = if horizontal { (b.w, b.h) } else { (b.h, b.w) };
        let half = (thick * 0.2).max(1.0);
        let gap_start = rng.random_range(0.0..len);
        let gap_len = rng.random_range(0.0..0.25) * len;
        let (x0, y0, x1, y1) = b.pixel_span();
        for y in y0.max(0)..y1.min(h as i64) {
            for x in x0.max(0)..x1.min(w as i64) {
                let (along, across) = if horizontal {
                    (x as f64 - b.x, y as f64 + 0.5 - (b.y + b.h / 2.0))
                } else {
                    (y as f64 - b.y, x as f64 + 0.5 - (b.x + b.w / 2.0))
                };
                // Gentle zig-zag so strokes look like cracks rather than bars.
                let wobble = libm::sin(along / len * core::f64::consts::PI * 3.0) * thick * 0.2;
                let in_gap = along >= gap_start && along < gap_start + gap_len;
                if (across - wobble).abs() <= half && !in_gap {
                    mask.set(x as u32, y as u32, true);
                }
            }
        }
    }
    mask
}

/// Mock embedder: a unit vector drawn from a generator seeded by the input bytes.
pub fn mock_embed(seed: u64, input: &[u8], dim: usize) -> Vec<f32> {
    let mut rng = rng_for(seed, &[b"embed", input]);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n > 1e-6 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::cosine;

    fn img(id: &str) -> ImageRef {
        ImageRef::new(id, "x.png", 160, 120).unwrap()
    }

    #[test]
    fn detector_is_deterministic_and_in_bounds() {
        for i in 0..50 {
            let im = img(&alloc::format!("img{i}"));
            let a = mock_detect(7, "yolo", &im);
            assert_eq!(a, mock_detect(7, "yolo", &im));
            assert!(a.len() <= 4);
            for d in &a {
                assert!(d.bbox.fits_within(160, 120));
                assert!((0.0..=1.0).contains(&d.confidence));
                assert_eq!(d.source, "yolo");
            }
        }
    }

    #[test]
    fn scene_objects_do_not_overlap() {
        for i in 0..100 {
            let objs = scene_objects(&alloc::format!("s{i}"), 200, 150);
            assert!((1..=3).contains(&objs.len()));
            for (a, oa) in objs.iter().enumerate() {
                assert!(oa.bbox.fits_within(200, 150));
                for ob in &objs[a + 1..] {
                    assert_eq!(oa.bbox.intersection_area(&ob.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn box_prompt_blob_stays_inside() {
        let b = BoundingBox::new(30., 20., 40., 30.).unwrap();
        let prompt = SegmentPrompt::Bbox { boxes: alloc::vec![b] };
        let m = mock_segment(3, &img("a"), &prompt);
        assert!(!m.is_empty());
        assert!(m.is_subset_of(&BinaryMask::from_box(160, 120, &b)));
        assert_eq!(m, mock_segment(3, &img("a"), &prompt));
    }

    #[test]
    fn embeddings_are_unit_and_distinct() {
        let corpus: Vec<Vec<f32>> = (0..40).map(|i| mock_embed(1, alloc::format!("doc{i}").as_bytes(), 64)).collect();
        for v in &corpus {
            let n: f64 = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
            assert!((libm::sqrt(n) - 1.0).abs() < 1e-6);
        }
        for i in 0..corpus.len() {
            for j in i + 1..corpus.len() {
                assert!(cosine(&corpus[i], &corpus[j]).unwrap() < 1.0);
            }
        }
        assert_eq!(mock_embed(1, b"x", 8), mock_embed(1, b"x", 8));
    }
}
