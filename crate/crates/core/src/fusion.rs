//! Ensemble fusion of expert outputs.
//!
//! Detections are grouped by class-aware single-link clustering on box IoU.
//! `fuse_union` keeps one representative per cluster; `fuse_intersection`
//! keeps only clusters supported by at least `min_agreement` distinct experts
//! and fuses their coordinates by confidence weighting.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, mask_union, BinaryMask, BoundingBox, Detection};

/// Payload produced by one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertPayload {
    Detections(Vec<Detection>),
    Mask(BinaryMask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOutput {
    pub expert: String,
    pub image_id: String,
    pub payload: ExpertPayload,
}

impl ExpertOutput {
    pub fn detections(expert: impl Into<String>, image_id: impl Into<String>, detections: Vec<Detection>) -> Self {
        Self {
            expert: expert.into(),
            image_id: image_id.into(),
            payload: ExpertPayload::Detections(detections),
        }
    }

    pub fn mask(expert: impl Into<String>, image_id: impl Into<String>, mask: BinaryMask) -> Self {
        Self {
            expert: expert.into(),
            image_id: image_id.into(),
            payload: ExpertPayload::Mask(mask),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// Box of the most confident member, maximum confidence.
    #[default]
    Max,
    /// Box of the most confident member, mean confidence.
    Mean,
    /// Confidence-weighted box, mean confidence.
    WeightedAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    pub min_agreement: usize,
    pub score_rule: ScoreRule,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.6,
            min_agreement: 2,
            score_rule: ScoreRule::Max,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "iou_threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        if self.min_agreement < 2 {
            return Err(Error::Config(alloc::format!(
                "min_agreement {} below 2",
                self.min_agreement
            )));
        }
        Ok(())
    }
}

/// A group of mutually chained detections of one category.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Members in canonical order (see [`canonical_order`]).
    pub members: Vec<Detection>,
}

impl Cluster {
    pub fn experts(&self) -> BTreeSet<&str> {
        self.members.iter().map(|d| d.source.as_str()).collect()
    }
}

/// Total order used for deterministic tie-breaking: expert id, then box
/// coordinates, then category and confidence.
pub fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    a.source
        .cmp(&b.source)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.category.cmp(&b.category))
        .then(a.confidence.total_cmp(&b.confidence))
}

fn collect_detections(outputs: &[ExpertOutput]) -> Result<Vec<Detection>> {
    let mut image: Option<&str> = None;
    let mut all = Vec::new();
    for out in outputs {
        match image {
            Some(id) if id != out.image_id => {
                return Err(Error::MixedImages(id.into(), out.image_id.clone()));
            }
            _ => image = Some(&out.image_id),
        }
        let ExpertPayload::Detections(dets) = &out.payload else {
            return Err(Error::PayloadKind { expected: "detections" });
        };
        for d in dets {
            let mut d = d.clone();
            d.source = out.expert.clone();
            all.push(d);
        }
    }
    all.sort_by(canonical_order);
    Ok(all)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Class-aware single-link clustering of every detection across experts.
pub fn cluster_boxes(outputs: &[ExpertOutput], cfg: &FusionConfig) -> Result<Vec<Cluster>> {
    cfg.validate()?;
    let dets = collect_detections(outputs)?;
    let n = dets.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if dets[i].category == dets[j].category && box_iou(&dets[i].bbox, &dets[j].bbox) >= cfg.iou_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    // Detections are in canonical order, so grouping by root in index order
    // yields canonically ordered members and clusters.
    let mut slots: Vec<Option<usize>> = alloc::vec![None; n];
    let mut clusters: Vec<Cluster> = Vec::new();
    for (i, d) in dets.into_iter().enumerate() {
        let root = find(&mut parent, i);
        match slots[root] {
            Some(c) => clusters[c].members.push(d),
            None => {
                slots[root] = Some(clusters.len());
                clusters.push(Cluster { members: alloc::vec![d] });
            }
        }
    }
    Ok(clusters)
}

fn top_member(cluster: &Cluster) -> &Detection {
    // Highest confidence; ties resolved by canonical order (first wins).
    let mut best = &cluster.members[0];
    for d in &cluster.members[1..] {
        if d.confidence > best.confidence {
            best = d;
        }
    }
    best
}

fn mean_confidence(cluster: &Cluster) -> f64 {
    cluster.members.iter().map(|d| d.confidence).sum::<f64>() / cluster.members.len() as f64
}

fn weighted_box(cluster: &Cluster) -> BoundingBox {
    let total: f64 = cluster.members.iter().map(|d| d.confidence).sum();
    let weight = |d: &Detection| {
        if total > 0.0 {
            d.confidence / total
        } else {
            1.0 / cluster.members.len() as f64
        }
    };
    let mut b = BoundingBox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 };
    for d in &cluster.members {
        let wgt = weight(d);
        b.x += wgt * d.bbox.x;
        b.y += wgt * d.bbox.y;
        b.w += wgt * d.bbox.w;
        b.h += wgt * d.bbox.h;
    }
    b
}

fn joined_sources(cluster: &Cluster) -> String {
    let experts: Vec<&str> = cluster.experts().into_iter().collect();
    experts.join("+")
}

fn representative(cluster: &Cluster, rule: ScoreRule) -> Detection {
    let top = top_member(cluster);
    let (bbox, confidence) = match rule {
        ScoreRule::Max => (top.bbox, top.confidence),
        ScoreRule::Mean => (top.bbox, mean_confidence(cluster)),
        ScoreRule::WeightedAvg => (weighted_box(cluster), mean_confidence(cluster)),
    };
    Detection {
        bbox,
        category: top.category,
        confidence,
        source: joined_sources(cluster),
    }
}

/// One representative per cluster; every cluster survives.
pub fn fuse_union(outputs: &[ExpertOutput], cfg: &FusionConfig) -> Result<Vec<Detection>> {
    Ok(cluster_boxes(outputs, cfg)?
        .iter()
        .map(|c| representative(c, cfg.score_rule))
        .collect())
}

/// Indices of the clusters that `fuse_intersection` keeps.
pub fn agreeing_clusters(clusters: &[Cluster], min_agreement: usize) -> Vec<usize> {
    clusters
        .iter()
        .enumerate()
        .filter(|(_, c)| c.experts().len() >= min_agreement)
        .map(|(i, _)| i)
        .collect()
}

/// Clusters backed by at least `min_agreement` distinct experts, fused by
/// confidence-weighted coordinates and mean confidence.
pub fn fuse_intersection(outputs: &[ExpertOutput], cfg: &FusionConfig) -> Result<Vec<Detection>> {
    let clusters = cluster_boxes(outputs, cfg)?;
    Ok(agreeing_clusters(&clusters, cfg.min_agreement)
        .into_iter()
        .map(|i| {
            let c = &clusters[i];
            Detection {
                bbox: weighted_box(c),
                category: c.members[0].category,
                confidence: mean_confidence(c),
                source: joined_sources(c),
            }
        })
        .collect())
}

/// Pixel-wise union of every crack segmenter's mask.
pub fn crack_mask_union(outputs: &[ExpertOutput]) -> Result<BinaryMask> {
    let masks = outputs
        .iter()
        .map(|o| match &o.payload {
            ExpertPayload::Mask(m) => Ok(m.clone()),
            ExpertPayload::Detections(_) => Err(Error::PayloadKind { expected: "mask" }),
        })
        .collect::<Result<Vec<_>>>()?;
    mask_union(&masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DefectCategory::{self, *};
    use alloc::vec;

    fn det(x: f64, y: f64, w: f64, h: f64, c: DefectCategory, p: f64) -> Detection {
        Detection::new(BoundingBox::new(x, y, w, h).unwrap(), c, p, "").unwrap()
    }

    fn out(expert: &str, dets: Vec<Detection>) -> ExpertOutput {
        ExpertOutput::detections(expert, "img", dets)
    }

    #[test]
    fn clustering_examples() {
        let cfg = FusionConfig::default();
        let same = [
            out("a", vec![det(0., 0., 10., 10., Crack, 0.9)]),
            out("b", vec![det(0., 0., 10., 10., Crack, 0.8)]),
        ];
        let cl = cluster_boxes(&same, &cfg).unwrap();
        assert_eq!(cl.len(), 1);
        assert_eq!(cl[0].members.len(), 2);

        let cross = [
            out("a", vec![det(0., 0., 10., 10., Crack, 0.9)]),
            out("b", vec![det(0., 0., 10., 10., Spalling, 0.8)]),
        ];
        assert_eq!(cluster_boxes(&cross, &cfg).unwrap().len(), 2);

        // IoU 81/119 ≈ 0.68 (rasterized: 9×9 overlap, 100+100−81 union).
        let shifted = [
            out("a", vec![det(0., 0., 10., 10., Crack, 0.9)]),
            out("b", vec![det(1., 1., 10., 10., Crack, 0.8)]),
        ];
        assert_eq!(cluster_boxes(&shifted, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn chains_link_transitively() {
        let cfg = FusionConfig { iou_threshold: 0.6, ..Default::default() };
        let chain = [out(
            "a",
            vec![
                det(0., 0., 10., 10., Crack, 0.5),
                det(1., 0., 10., 10., Crack, 0.5),
                det(2., 0., 10., 10., Crack, 0.5),
                det(3., 0., 10., 10., Crack, 0.5),
                det(4., 0., 10., 10., Crack, 0.5),
            ],
        )];
        // (0,0) and (4,0) have IoU 6/14 < 0.6, but adjacent pairs link.
        assert_eq!(cluster_boxes(&chain, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn union_examples() {
        let cfg = FusionConfig::default();
        // IoU((0,0,10,10), (0,0,10,8)) = 80/100 = 0.8.
        let fused = fuse_union(
            &[
                out("a", vec![det(0., 0., 10., 10., Crack, 0.9)]),
                out("b", vec![det(0., 0., 10., 8., Crack, 0.8)]),
            ],
            &cfg,
        )
        .unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[0].confidence, 0.9);
        assert_eq!(fused[0].bbox, BoundingBox::new(0., 0., 10., 10.).unwrap());
        assert_eq!(fused[0].source, "a+b");

        let single = fuse_union(&[out("a", vec![det(3., 3., 4., 4., Vegetation, 0.4)]), out("b", vec![])], &cfg).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].bbox, BoundingBox::new(3., 3., 4., 4.).unwrap());

        assert!(fuse_union(&[out("a", vec![]), out("b", vec![])], &cfg).unwrap().is_empty());
    }

    #[test]
    fn union_score_rules() {
        let outs = [
            out("a", vec![det(0., 0., 10., 10., Crack, 0.9)]),
            out("b", vec![det(0., 0., 10., 8., Crack, 0.3)]),
        ];
        let mean = fuse_union(&outs, &FusionConfig { score_rule: ScoreRule::Mean, ..Default::default() }).unwrap();
        assert!((mean[0].confidence - 0.6).abs() < 1e-12);
        let w = fuse_union(&outs, &FusionConfig { score_rule: ScoreRule::WeightedAvg, ..Default::default() }).unwrap();
        assert!((w[0].bbox.h - (0.75 * 10. + 0.25 * 8.)).abs() < 1e-12);
    }

    #[test]
    fn max_ties_prefer_lexicographic_expert() {
        let outs = [
            out("zeta", vec![det(0., 0., 10., 10., Crack, 0.7)]),
            out("alpha", vec![det(0., 0., 10., 9., Crack, 0.7)]),
        ];
        let fused = fuse_union(&outs, &FusionConfig::default()).unwrap();
        assert_eq!(fused[0].bbox.h, 9.0);
    }

    #[test]
    fn intersection_examples() {
        let cfg = FusionConfig::default();
        let agree = fuse_intersection(
            &[
                out("a", vec![det(0., 0., 10., 10., Crack, 0.9)]),
                out("b", vec![det(0., 0., 10., 10., Crack, 0.9)]),
            ],
            &cfg,
        )
        .unwrap();
        assert_eq!(agree.len(), 1);
        assert!((agree[0].confidence - 0.9).abs() < 1e-12);
        assert_eq!(agree[0].bbox, BoundingBox::new(0., 0., 10., 10.).unwrap());

        let lonely = fuse_intersection(&[out("a", vec![det(0., 0., 10., 10., Crack, 0.7)]), out("b", vec![])], &cfg).unwrap();
        assert!(lonely.is_empty());

        // IoU 64/136 ≈ 0.47 < 0.6.
        let apart = fuse_intersection(
            &[
                out("a", vec![det(0., 0., 10., 10., Crack, 0.5)]),
                out("b", vec![det(2., 2., 10., 10., Crack, 0.5)]),
            ],
            &cfg,
        )
        .unwrap();
        assert!(apart.is_empty());
    }

    #[test]
    fn same_expert_duplicates_do_not_count_as_agreement() {
        let outs = [out("a", vec![det(0., 0., 10., 10., Crack, 0.9), det(0., 0., 10., 10., Crack, 0.8)])];
        assert!(fuse_intersection(&outs, &FusionConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn rejects_mixed_images_and_bad_config() {
        let outs = [
            ExpertOutput::detections("a", "img1", vec![]),
            ExpertOutput::detections("b", "img2", vec![]),
        ];
        assert!(matches!(cluster_boxes(&outs, &FusionConfig::default()), Err(Error::MixedImages(..))));
        let bad = FusionConfig { min_agreement: 1, ..Default::default() };
        assert!(cluster_boxes(&[], &bad).is_err());
        let bad = FusionConfig { iou_threshold: 0.0, ..Default::default() };
        assert!(cluster_boxes(&[], &bad).is_err());
    }

    #[test]
    fn crack_union_examples() {
        let m1 = BinaryMask::from_fn(4, 4, |x, y| x == 0 && y == 0);
        let m2 = BinaryMask::from_fn(4, 4, |x, y| x == 3 && y == 3);
        assert_eq!(crack_mask_union(&[ExpertOutput::mask("s1", "i", m1.clone())]).unwrap(), m1);
        let u = crack_mask_union(&[ExpertOutput::mask("s1", "i", m1.clone()), ExpertOutput::mask("s2", "i", m2)]).unwrap();
        assert_eq!(u.count(), 2);
        let three: Vec<_> = (0..3).map(|i| ExpertOutput::mask(alloc::format!("s{i}"), "i", m1.clone())).collect();
        assert_eq!(crack_mask_union(&three).unwrap(), m1);
        assert!(crack_mask_union(&[out("d", vec![])]).is_err());
    }
}
