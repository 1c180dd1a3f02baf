//! Detection and segmentation metrics: Precision, Recall, F1, mAP50,
//! mAP50:95 (101-point interpolation), mIoU and pixel accuracy.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, BinaryMask, BoundingBox, DefectCategory, Detection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthItem {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub category: DefectCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub prediction: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

/// Indices refer to the prediction and ground-truth slices passed to [`match_detections`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub assignments: Vec<Assignment>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.assignments.len()
    }

    pub fn fp(&self) -> usize {
        self.false_positives.len()
    }

    pub fn fn_count(&self) -> usize {
        self.false_negatives.len()
    }
}

fn rank_order(a: &Prediction, b: &Prediction) -> Ordering {
    b.detection
        .confidence
        .total_cmp(&a.detection.confidence)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then(a.detection.bbox.x.total_cmp(&b.detection.bbox.x))
        .then(a.detection.bbox.y.total_cmp(&b.detection.bbox.y))
}

/// Prediction indices sorted by confidence descending, ties by (image id, x, y).
fn ranked(preds: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| rank_order(&preds[i], &preds[j]).then(i.cmp(&j)));
    order
}

/// Greedy confidence-ordered, class-aware one-to-one matching.
pub fn match_detections(preds: &[Prediction], gts: &[GroundTruthItem], iou_t: f64) -> MatchResult {
    let mut taken = alloc::vec![false; gts.len()];
    let mut result = MatchResult::default();
    for p in ranked(preds) {
        let pred = &preds[p];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image_id != pred.image_id || gt.category != pred.detection.category {
                continue;
            }
            let iou = box_iou(&pred.detection.bbox, &gt.bbox);
            if iou >= iou_t && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                taken[g] = true;
                result.assignments.push(Assignment {
                    prediction: p,
                    ground_truth: g,
                    iou,
                });
            }
            None => result.false_positives.push(p),
        }
    }
    result.false_negatives = (0..gts.len()).filter(|&g| !taken[g]).collect();
    result
}

/// Precision, recall and F1, each 0 when its denominator is 0.
pub fn prf1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    // 2PR/(P+R) written over counts, which keeps exact ratios exact.
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    (p, r, f1)
}

/// 101-point interpolated AP from a ranked TP/FP sequence.
pub fn interpolated_ap(outcomes: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(outcomes.len());
    let mut recall = Vec::with_capacity(outcomes.len());
    let mut tp = 0usize;
    for (i, &hit) in outcomes.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope: max precision at any recall to the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    let mut idx = 0usize;
    for k in 0..=100u32 {
        let r = k as f64 / 100.0;
        while idx < recall.len() && recall[idx] < r {
            idx += 1;
        }
        if idx < recall.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// Per-class AP at `iou_t` for every class that has ground truth.
pub fn class_average_precision(
    preds: &[Prediction],
    gts: &[GroundTruthItem],
    iou_t: f64,
) -> BTreeMap<DefectCategory, f64> {
    let mut out = BTreeMap::new();
    for category in DefectCategory::ALL {
        let class_gt: Vec<GroundTruthItem> = gts.iter().filter(|g| g.category == category).cloned().collect();
        if class_gt.is_empty() {
            continue;
        }
        let class_preds: Vec<Prediction> = preds
            .iter()
            .filter(|p| p.detection.category == category)
            .cloned()
            .collect();
        let matched = match_detections(&class_preds, &class_gt, iou_t);
        let mut hit = alloc::vec![false; class_preds.len()];
        for a in &matched.assignments {
            hit[a.prediction] = true;
        }
        let outcomes: Vec<bool> = ranked(&class_preds).into_iter().map(|i| hit[i]).collect();
        out.insert(category, interpolated_ap(&outcomes, class_gt.len()));
    }
    out
}

/// Class-mean AP; classes without ground truth are excluded.
pub fn average_precision(preds: &[Prediction], gts: &[GroundTruthItem], iou_t: f64) -> f64 {
    let per_class = class_average_precision(preds, gts, iou_t);
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.values().sum::<f64>() / per_class.len() as f64
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// `(mAP50, mAP50:95)`.
pub fn map_range(preds: &[Prediction], gts: &[GroundTruthItem]) -> (f64, f64) {
    let aps = coco_thresholds().map(|t| average_precision(preds, gts, t));
    (aps[0], aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub map50_95: f64,
}

/// Micro-averaged P/R/F1 at IoU 0.5 plus the mAP columns.
pub fn detection_metrics(preds: &[Prediction], gts: &[GroundTruthItem]) -> DetectionMetrics {
    let m = match_detections(preds, gts, 0.5);
    let (precision, recall, f1) = prf1(m.tp(), m.fp(), m.fn_count());
    let (map50, map50_95) = map_range(preds, gts);
    DetectionMetrics {
        precision,
        recall,
        f1,
        map50,
        map50_95,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pixel_accuracy: f64,
    pub per_class_iou: BTreeMap<DefectCategory, f64>,
}

/// Pixel counts accumulated over one or more frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegAccumulator {
    intersection: BTreeMap<DefectCategory, u64>,
    union: BTreeMap<DefectCategory, u64>,
    tp: u64,
    fp: u64,
    fn_: u64,
    correct: u64,
    total: u64,
}

impl SegAccumulator {
    /// Adds one frame given one mask per class for prediction and ground truth.
    ///
    /// A pixel counts as correctly labeled when the set of predicted classes
    /// covering it equals the set of ground-truth classes (both empty = background).
    pub fn add_frame(
        &mut self,
        pred: &BTreeMap<DefectCategory, BinaryMask>,
        gt: &BTreeMap<DefectCategory, BinaryMask>,
    ) -> Result<()> {
        let dims = pred
            .values()
            .chain(gt.values())
            .next()
            .map(|m| m.dims())
            .ok_or(Error::Empty("segmentation masks"))?;
        for m in pred.values().chain(gt.values()) {
            if m.dims() != dims {
                return Err(Error::Shape {
                    expected: dims,
                    found: m.dims(),
                });
            }
        }
        let zeros = BinaryMask::zeros(dims.0, dims.1);
        for category in DefectCategory::ALL {
            let p = pred.get(&category).unwrap_or(&zeros);
            let g = gt.get(&category).unwrap_or(&zeros);
            let (mut inter, mut union) = (0u64, 0u64);
            for (&a, &b) in p.bits().iter().zip(g.bits()) {
                inter += (a && b) as u64;
                union += (a || b) as u64;
                self.fp += (a && !b) as u64;
                self.fn_ += (!a && b) as u64;
            }
            self.tp += inter;
            if union > 0 {
                *self.intersection.entry(category).or_insert(0) += inter;
                *self.union.entry(category).or_insert(0) += union;
            }
        }
        let n = dims.0 as usize * dims.1 as usize;
        for i in 0..n {
            let same = DefectCategory::ALL.iter().all(|c| {
                let p = pred.get(c).is_some_and(|m| m.bits()[i]);
                let g = gt.get(c).is_some_and(|m| m.bits()[i]);
                p == g
            });
            self.correct += same as u64;
        }
        self.total += n as u64;
        Ok(())
    }

    pub fn finish(&self) -> SegMetrics {
        let per_class_iou: BTreeMap<DefectCategory, f64> = self
            .union
            .iter()
            .map(|(c, &u)| (*c, self.intersection[c] as f64 / u as f64))
            .collect();
        let miou = if per_class_iou.is_empty() {
            1.0
        } else {
            per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
        };
        let (precision, recall, f1) = prf1(self.tp as usize, self.fp as usize, self.fn_ as usize);
        SegMetrics {
            miou,
            precision,
            recall,
            f1,
            pixel_accuracy: if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 },
            per_class_iou,
        }
    }
}

/// Segmentation metrics for a single frame; see [`SegAccumulator::add_frame`].
pub fn seg_metrics(
    pred: &BTreeMap<DefectCategory, BinaryMask>,
    gt: &BTreeMap<DefectCategory, BinaryMask>,
) -> Result<SegMetrics> {
    let mut acc = SegAccumulator::default();
    acc.add_frame(pred, gt)?;
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use DefectCategory::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn pred(img: &str, b: BoundingBox, c: DefectCategory, conf: f64) -> Prediction {
        Prediction {
            image_id: img.into(),
            detection: Detection::new(b, c, conf, "m").unwrap(),
        }
    }

    fn gt(img: &str, b: BoundingBox, c: DefectCategory) -> GroundTruthItem {
        GroundTruthItem { image_id: img.into(), bbox: b, category: c, mask: None }
    }

    #[test]
    fn matching_examples() {
        let g = [gt("i", bx(0., 0., 10., 10.), Crack)];
        let m = match_detections(&[pred("i", bx(0., 0., 10., 10.), Crack, 0.9)], &g, 0.5);
        assert_eq!((m.tp(), m.fp(), m.fn_count()), (1, 0, 0));

        let two = [pred("i", bx(0., 0., 10., 10.), Crack, 0.6), pred("i", bx(0., 0., 10., 10.), Crack, 0.9)];
        let m = match_detections(&two, &g, 0.5);
        assert_eq!(m.assignments[0].prediction, 1);
        assert_eq!(m.false_positives, vec![0]);

        let wrong = match_detections(&[pred("i", bx(0., 0., 10., 10.), Spalling, 0.9)], &g, 0.5);
        assert_eq!((wrong.tp(), wrong.fp(), wrong.fn_count()), (0, 1, 1));

        let other_image = match_detections(&[pred("j", bx(0., 0., 10., 10.), Crack, 0.9)], &g, 0.5);
        assert_eq!(other_image.tp(), 0);
    }

    #[test]
    fn prf1_examples() {
        let (p, r, f) = prf1(2, 1, 1);
        assert_eq!((p, r, f), (2. / 3., 2. / 3., 2. / 3.));
        assert_eq!(prf1(0, 0, 0), (0.0, 0.0, 0.0));
        assert_eq!(prf1(5, 0, 0), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ap_examples() {
        let g = [gt("i", bx(0., 0., 10., 10.), Crack)];
        assert_eq!(average_precision(&[pred("i", bx(0., 0., 10., 10.), Crack, 0.9)], &g, 0.5), 1.0);
        assert_eq!(average_precision(&[], &g, 0.5), 0.0);
        let expected = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((interpolated_ap(&[true, false, true], 2) - expected).abs() < 1e-12);
        // Classes without ground truth do not count.
        let stray = [pred("i", bx(0., 0., 10., 10.), Crack, 0.9), pred("i", bx(50., 50., 5., 5.), Vegetation, 0.9)];
        assert_eq!(average_precision(&stray, &g, 0.5), 1.0);
    }

    #[test]
    fn map_examples() {
        let g = [gt("i", bx(0., 0., 10., 10.), Crack)];
        assert_eq!(map_range(&[pred("i", bx(0., 0., 10., 10.), Crack, 0.9)], &g), (1.0, 1.0));
        // IoU = 70 / 100.
        assert_eq!(map_range(&[pred("i", bx(0., 0., 7., 10.), Crack, 0.9)], &g), (1.0, 0.5));
        assert_eq!(map_range(&[], &g), (0.0, 0.0));
    }

    #[test]
    fn seg_examples() {
        let block = |x0: u32| BinaryMask::from_fn(10, 10, move |x, y| (x0..x0 + 2).contains(&x) && (2..4).contains(&y));
        let gt_map = BTreeMap::from([(Spalling, block(2))]);
        let same = seg_metrics(&gt_map, &gt_map).unwrap();
        assert_eq!((same.miou, same.pixel_accuracy, same.f1), (1.0, 1.0, 1.0));

        let empty = seg_metrics(&BTreeMap::from([(Spalling, BinaryMask::zeros(10, 10))]), &gt_map).unwrap();
        assert_eq!((empty.miou, empty.recall), (0.0, 0.0));

        let shifted = seg_metrics(&BTreeMap::from([(Spalling, block(3))]), &gt_map).unwrap();
        assert!((shifted.miou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(shifted.pixel_accuracy, 0.96);

        let bad = BTreeMap::from([(Spalling, BinaryMask::zeros(5, 5))]);
        assert!(seg_metrics(&bad, &gt_map).is_err());
    }
}
