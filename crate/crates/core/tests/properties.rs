use std::collections::{BTreeMap, BTreeSet};

use facadefixer_core::adjudication::{
    adjudicate, build_request, mock_adjudicate, CandidatePayload, CandidateSet, EndpointFailure,
};
use facadefixer_core::curation::dedup;
use facadefixer_core::eval::{average_precision, detection_metrics, match_detections, GroundTruthItem, Prediction};
use facadefixer_core::fusion::{cluster_boxes, crack_mask_union, fuse_intersection, fuse_union, ExpertOutput, FusionConfig};
use facadefixer_core::geometry::{
    box_iou, clip_mask_to_boxes, mask_union, BinaryMask, BoundingBox, DefectCategory, Detection, ImageRef, RasterImage,
};
use facadefixer_core::memory::{cosine, fit_scale, MemoryBank, MemoryEntry, Provenance, QuerySpec};
use facadefixer_core::plan::{interpret_profile, plan};
use facadefixer_core::recompose::{
    composed_instance_mask, margin_region, mock_compose, plan_placement, verify_label_consistency, BlendParams,
    ConsistencyThresholds,
};
use facadefixer_core::memory::BackgroundTemplate;
use proptest::prelude::*;

fn int_box() -> impl Strategy<Value = BoundingBox> {
    (0u32..40, 0u32..40, 1u32..25, 1u32..25).prop_map(|(x, y, w, h)| BoundingBox::new(x as f64, y as f64, w as f64, h as f64).unwrap())
}

fn any_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.01..50.0f64, 0.01..50.0f64).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
}

fn mask(w: u32, h: u32) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), (w * h) as usize).prop_map(move |bits| BinaryMask::from_bits(w, h, bits).unwrap())
}

fn category() -> impl Strategy<Value = DefectCategory> {
    (0usize..6).prop_map(|i| DefectCategory::ALL[i])
}

fn raster_area(b: &BoundingBox) -> i64 {
    b.w as i64 * b.h as i64
}

fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let mut inter = 0i64;
    for y in 0..80 {
        for x in 0..80 {
            let inside = |r: &BoundingBox| (x as f64) >= r.x && (x as f64) < r.right() && (y as f64) >= r.y && (y as f64) < r.bottom();
            inter += (inside(a) && inside(b)) as i64;
        }
    }
    inter as f64 / (raster_area(a) + raster_area(b) - inter) as f64
}

proptest! {
    #[test]
    fn box_iou_is_symmetric(a in any_box(), b in any_box()) {
        prop_assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
        let v = box_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn box_iou_matches_rasterization(a in int_box(), b in int_box()) {
        prop_assert!((box_iou(&a, &b) - raster_iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn mask_union_laws((a, b, c) in (1u32..16, 1u32..16).prop_flat_map(|(w, h)| (mask(w, h), mask(w, h), mask(w, h)))) {
        let ab = mask_union(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(&ab, &mask_union(&[b.clone(), a.clone()]).unwrap());
        let left = mask_union(&[ab, c.clone()]).unwrap();
        let right = mask_union(&[a.clone(), mask_union(&[b.clone(), c.clone()]).unwrap()]).unwrap();
        prop_assert_eq!(left, right);
        prop_assert_eq!(mask_union(&[a.clone(), a.clone()]).unwrap(), a);
    }

    #[test]
    fn rle_round_trip(m in (1u32..64, 1u32..64).prop_flat_map(|(w, h)| mask(w, h))) {
        let rle = m.to_rle();
        prop_assert_eq!(rle.counts.iter().map(|&c| c as u64).sum::<u64>(), m.width() as u64 * m.height() as u64);
        prop_assert_eq!(BinaryMask::from_rle(&rle).unwrap(), m);
    }

    #[test]
    fn clipping_never_adds_pixels(m in mask(64, 64), boxes in proptest::collection::vec(int_box(), 0..4)) {
        let clipped = clip_mask_to_boxes(&m, &boxes).unwrap();
        prop_assert!(clipped.is_subset_of(&m));
    }

    #[test]
    fn dilation_contains_input_and_matches_square_oracle(m in mask(20, 14), r in 0u32..3) {
        let d = m.dilate(r);
        prop_assert!(m.is_subset_of(&d));
        let r = r as i64;
        let oracle = BinaryMask::from_fn(20, 14, |x, y| {
            (-r..=r).any(|dy| (-r..=r).any(|dx| {
                let (u, v) = (x as i64 + dx, y as i64 + dy);
                (0..20).contains(&u) && (0..14).contains(&v) && m.get(u as u32, v as u32)
            }))
        });
        prop_assert_eq!(d, oracle);
    }
}

fn detections_strategy(expert: &'static str) -> impl Strategy<Value = Vec<Detection>> {
    proptest::collection::vec((int_box(), 0usize..2, 1u32..100), 0..5).prop_map(move |v| {
        v.into_iter()
            .map(|(b, c, conf)| Detection::new(b, DefectCategory::ALL[c], conf as f64 / 100.0, expert).unwrap())
            .collect()
    })
}

fn sorted(mut v: Vec<Detection>) -> Vec<Detection> {
    v.sort_by(facadefixer_core::fusion::canonical_order);
    v
}

proptest! {
    #[test]
    fn fusion_is_permutation_invariant_and_nested(
        a in detections_strategy("a"),
        b in detections_strategy("b"),
        c in detections_strategy("c"),
        shuffle in any::<u64>(),
    ) {
        let cfg = FusionConfig::default();
        let outs = vec![
            ExpertOutput::detections("a", "img", a.clone()),
            ExpertOutput::detections("b", "img", b.clone()),
            ExpertOutput::detections("c", "img", c.clone()),
        ];
        let mut rev: Vec<ExpertOutput> = outs.iter().rev().cloned().collect();
        if shuffle % 2 == 0 {
            if let facadefixer_core::fusion::ExpertPayload::Detections(d) = &mut rev[0].payload {
                d.reverse();
            }
        }
        prop_assert_eq!(sorted(fuse_union(&outs, &cfg).unwrap()), sorted(fuse_union(&rev, &cfg).unwrap()));
        prop_assert_eq!(sorted(fuse_intersection(&outs, &cfg).unwrap()), sorted(fuse_intersection(&rev, &cfg).unwrap()));

        let clusters = cluster_boxes(&outs, &cfg).unwrap();
        let union = fuse_union(&outs, &cfg).unwrap();
        let inter = fuse_intersection(&outs, &cfg).unwrap();
        prop_assert_eq!(union.len(), clusters.len());
        let agreeing = clusters.iter().filter(|cl| cl.experts().len() >= cfg.min_agreement).count();
        prop_assert_eq!(inter.len(), agreeing);
        prop_assert!(inter.len() <= union.len());
    }

    #[test]
    fn crack_union_dominates_each_expert(a in mask(24, 24), b in mask(24, 24)) {
        let u = crack_mask_union(&[ExpertOutput::mask("a", "i", a.clone()), ExpertOutput::mask("b", "i", b.clone())]).unwrap();
        prop_assert!(u.count() >= a.count().max(b.count()));
    }
}

fn image_ref() -> ImageRef {
    ImageRef::new("img", "img.png", 64, 64).unwrap()
}

proptest! {
    #[test]
    fn adjudication_picks_present_labels(
        sets in proptest::collection::vec(detections_strategy("x"), 1..5),
        reply in prop_oneof![
            Just(None),
            "[a-z]{1,6}".prop_map(Some),
            (0usize..5).prop_map(|i| Some(format!("c{i}"))),
        ],
    ) {
        let candidates: Vec<CandidateSet> = sets
            .into_iter()
            .enumerate()
            .map(|(i, d)| CandidateSet::new(format!("c{i}"), CandidatePayload::Detections(d)))
            .collect();
        let req = build_request(image_ref(), candidates, "pick one").unwrap();
        let labels: BTreeSet<String> = req.labels().map(String::from).collect();
        let mut endpoint = |_: &str| match &reply {
            Some(label) => Ok(format!("{{\"chosen\":\"{label}\",\"rationale\":\"r\"}}")),
            None => Err(EndpointFailure("down".into())),
        };
        let live = adjudicate(&req, Some(&mut endpoint), "c0").unwrap();
        prop_assert!(labels.contains(&live.chosen));
        let disabled = adjudicate(&req, None, "c0").unwrap();
        prop_assert!(labels.contains(&disabled.chosen));
        prop_assert!(labels.contains(&mock_adjudicate(&req).chosen));
    }

    #[test]
    fn mock_adjudication_ignores_candidate_order(sets in proptest::collection::vec(detections_strategy("x"), 2..5)) {
        let candidates: Vec<CandidateSet> = sets
            .into_iter()
            .enumerate()
            .map(|(i, d)| CandidateSet::new(format!("c{i}"), CandidatePayload::Detections(d)))
            .collect();
        let fwd = build_request(image_ref(), candidates.clone(), "ctx").unwrap();
        let rev = build_request(image_ref(), candidates.into_iter().rev().collect(), "ctx").unwrap();
        prop_assert_eq!(mock_adjudicate(&fwd).chosen, mock_adjudicate(&rev).chosen);
    }
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-3);
    v.into_iter().map(|x| x / n).collect()
}

fn entry(id: usize, cat: DefectCategory, emb: Vec<f32>, mw: u32, mh: u32) -> MemoryEntry {
    MemoryEntry {
        id: format!("e{id:04}"),
        crop: ImageRef::new(format!("e{id:04}"), "crop.png", mw, mh).unwrap(),
        crop_pixels: RasterImage::filled(mw, mh, [10, 20, 30]).unwrap(),
        mask: BinaryMask::from_fn(mw, mh, |_, _| true),
        category: cat,
        text: String::new(),
        embedding: emb,
        provenance: Provenance::Real,
        created_at: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn query_matches_linear_scan(
        entries in proptest::collection::vec((category(), proptest::collection::vec(-1.0f32..1.0, 6), 1u32..40, 1u32..40), 1..40),
        q in proptest::collection::vec(-1.0f32..1.0, 6),
        filter in proptest::option::of(category()),
        k in 1usize..10,
        region in proptest::option::of(int_box()),
    ) {
        let mut bank = MemoryBank::new(6);
        for (i, (c, e, w, h)) in entries.iter().enumerate() {
            bank.insert(entry(i, *c, unit(e.clone()), *w, *h)).unwrap();
        }
        let q = unit(q);
        let spec = QuerySpec { category: filter, embedding: q.clone(), k, region };
        let got: Vec<String> = bank.query_top_k(&spec).unwrap().into_iter().map(|(e, _)| e.id.clone()).collect();
        let mut scan: Vec<(String, f64)> = bank
            .entries()
            .filter(|e| filter.is_none_or(|c| c == e.category))
            .filter(|e| region.is_none_or(|r| fit_scale(e.mask.width(), e.mask.height(), &r).is_some()))
            .map(|e| (e.id.clone(), cosine(&e.embedding, &q).unwrap()))
            .collect();
        scan.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let want: Vec<String> = scan.into_iter().take(k).map(|(id, _)| id).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn dedup_is_order_free_and_monotone(
        vs in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..25),
        t in 0.5f64..0.95,
    ) {
        let items: Vec<(String, Vec<f32>)> = vs.into_iter().enumerate().map(|(i, v)| (format!("i{i:02}"), unit(v))).collect();
        let keep = dedup(&items, t).unwrap();
        let rev: Vec<_> = items.iter().rev().cloned().collect();
        prop_assert_eq!(&keep, &dedup(&rev, t).unwrap());
        let looser = dedup(&items, (t + 0.04).min(0.99)).unwrap();
        prop_assert!(looser.len() >= keep.len());
    }
}

fn pred(img: &str, b: BoundingBox, c: DefectCategory, conf: f64) -> Prediction {
    Prediction {
        image_id: img.into(),
        detection: Detection::new(b, c, conf, "m").unwrap(),
    }
}

fn scene() -> impl Strategy<Value = (Vec<Prediction>, Vec<GroundTruthItem>)> {
    let preds = proptest::collection::vec((0usize..2, int_box(), 0usize..2, 1u32..1000), 0..8);
    let gts = proptest::collection::vec((0usize..2, int_box(), 0usize..2), 0..6);
    (preds, gts).prop_map(|(p, g)| {
        let imgs = ["a", "b"];
        (
            p.into_iter()
                .map(|(i, b, c, conf)| pred(imgs[i], b, DefectCategory::ALL[c], conf as f64 / 1000.0))
                .collect(),
            g.into_iter()
                .map(|(i, b, c)| GroundTruthItem {
                    image_id: imgs[i].into(),
                    bbox: b,
                    category: DefectCategory::ALL[c],
                    mask: None,
                })
                .collect(),
        )
    })
}

proptest! {
    #[test]
    fn ap_bounded_and_monotone_in_threshold((preds, gts) in scene()) {
        let mut last = f64::INFINITY;
        for t in [0.3, 0.5, 0.7, 0.9] {
            let ap = average_precision(&preds, &gts, t);
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(ap <= last + 1e-12);
            last = ap;
        }
    }

    #[test]
    fn matching_is_one_to_one_and_class_consistent((preds, gts) in scene()) {
        let m = match_detections(&preds, &gts, 0.5);
        let mut used_p = BTreeSet::new();
        let mut used_g = BTreeSet::new();
        for a in &m.assignments {
            prop_assert!(used_p.insert(a.prediction) && used_g.insert(a.ground_truth));
            prop_assert_eq!(preds[a.prediction].detection.category, gts[a.ground_truth].category);
            prop_assert_eq!(&preds[a.prediction].image_id, &gts[a.ground_truth].image_id);
            prop_assert!(a.iou >= 0.5);
        }
        prop_assert_eq!(m.tp() + m.fp(), preds.len());
        prop_assert_eq!(m.tp() + m.fn_count(), gts.len());
    }

    #[test]
    fn metrics_ignore_confidence_scale((preds, gts) in scene(), s in 0.1f64..1.0) {
        let scaled: Vec<Prediction> = preds
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.detection.confidence *= s;
                p
            })
            .collect();
        prop_assert_eq!(detection_metrics(&preds, &gts), detection_metrics(&scaled, &gts));
    }
}

fn background(seed: u8) -> BackgroundTemplate {
    let (w, h) = (80, 60);
    let px: Vec<u8> = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
    BackgroundTemplate {
        id: format!("bg-{seed}"),
        image: ImageRef::new(format!("bg-{seed}"), "bg.png", w, h).unwrap(),
        pixels: RasterImage::new(w, h, px).unwrap(),
        embedding: vec![1.0, 0.0],
        provenance: Provenance::Real,
    }
}

fn blob_entry(mw: u32, mh: u32, seed: u64) -> MemoryEntry {
    let mut e = entry(seed as usize, DefectCategory::RustStain, vec![0.0, 1.0], mw + 2, mh + 2);
    e.mask = BinaryMask::from_fn(mw + 2, mh + 2, |x, y| {
        x >= 1 && y >= 1 && x <= mw && y <= mh && !(x + y + seed as u32).is_multiple_of(5)
    });
    e.crop_pixels = RasterImage::new(mw + 2, mh + 2, (0..(mw + 2) * (mh + 2) * 3).map(|i| (i * 7 % 251) as u8).collect()).unwrap();
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composition_is_local_and_consistent(mw in 8u32..30, mh in 8u32..30, seed in any::<u64>(), feather in 0u32..3, alpha in 0.3f64..1.0) {
        let bg = background(seed as u8);
        let e = blob_entry(mw, mh, seed);
        let region = margin_region(80, 60).unwrap();
        prop_assume!(fit_scale(mw, mh, &region).is_some());
        let spec = plan_placement(&bg, &e, seed, BlendParams { alpha, feather }).unwrap();
        prop_assert!(spec.placement.fits_within(80, 60));
        let sample = mock_compose(&spec).unwrap();
        let allowed = composed_instance_mask(&spec).unwrap().dilate(feather);
        for y in 0..60 {
            for x in 0..80 {
                if !allowed.get(x, y) {
                    prop_assert_eq!(sample.image.get(x, y), bg.pixels.get(x, y));
                }
            }
        }
        let report = verify_label_consistency(&sample, &bg.pixels, feather, ConsistencyThresholds::default()).unwrap();
        prop_assert_eq!(report.leakage_px, 0);
    }

    #[test]
    fn plans_are_closed_for_every_toggle_set(bits in 1u8..32) {
        let names = ["detect", "segment", "recompose", "curate", "evaluate"];
        let toggles: Vec<&str> = names.iter().enumerate().filter(|(i, _)| bits & (1 << i) != 0).map(|(_, n)| *n).collect();
        let profile = interpret_profile(&serde_json::json!({ "toggles": toggles })).unwrap();
        let p = plan(&profile);
        p.validate().unwrap();
        p.validate_for(&profile).unwrap();
        let ids: BTreeMap<&str, usize> = p.topological_order().unwrap().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        for (from, to) in &p.edges {
            prop_assert!(ids[from.as_str()] < ids[to.as_str()]);
        }
    }
}
