//! Metrics over dataset-format predictions and ground truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use facadefixer_core::eval::{detection_metrics, GroundTruthItem, Prediction, SegAccumulator};
use facadefixer_core::geometry::{BinaryMask, DefectCategory, Detection};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Sidecar};
use crate::error::{write_atomic, write_json, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "mAP50")]
    pub map50: f64,
    #[serde(rename = "mAP50:95")]
    pub map50_95: f64,
    #[serde(rename = "F1-score")]
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "F1-score")]
    pub f1: f64,
    #[serde(rename = "PA")]
    pub pixel_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub images: usize,
    pub detection: DetectionRow,
    /// Present when the ground truth carries masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationRow>,
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub image_id: String,
    pub dims: (u32, u32),
    pub predictions: Vec<Detection>,
    pub pred_masks: BTreeMap<DefectCategory, BinaryMask>,
    pub gt: Vec<GroundTruthItem>,
    /// `None` when the ground truth of this image has no masks.
    pub gt_masks: Option<BTreeMap<DefectCategory, BinaryMask>>,
}

pub fn evaluate_frames(frames: &[EvalFrame]) -> Result<MetricsTable> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut seg = SegAccumulator::default();
    let mut any_masks = false;
    for f in frames {
        preds.extend(f.predictions.iter().map(|d| Prediction {
            image_id: f.image_id.clone(),
            detection: d.clone(),
        }));
        gts.extend(f.gt.iter().cloned());
        if let Some(gt_masks) = &f.gt_masks {
            any_masks = true;
            let mut pred = f.pred_masks.clone();
            if pred.is_empty() && gt_masks.is_empty() {
                // Pure background frame: still counts toward pixel accuracy.
                pred.insert(DefectCategory::Crack, BinaryMask::zeros(f.dims.0, f.dims.1));
            }
            seg.add_frame(&pred, gt_masks)?;
        }
    }
    let m = detection_metrics(&preds, &gts);
    let segmentation = any_masks.then(|| {
        let s = seg.finish();
        SegmentationRow {
            miou: s.miou,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            pixel_accuracy: s.pixel_accuracy,
        }
    });
    Ok(MetricsTable {
        images: frames.len(),
        detection: DetectionRow {
            precision: m.precision,
            recall: m.recall,
            map50: m.map50,
            map50_95: m.map50_95,
            f1: m.f1,
        },
        segmentation,
    })
}

fn gt_items(s: &Sidecar) -> Vec<GroundTruthItem> {
    s.instances
        .iter()
        .map(|a| GroundTruthItem {
            image_id: s.image.id.clone(),
            bbox: a.bbox,
            category: a.category,
            mask: None,
        })
        .collect()
}

/// Frame for one image given its ground-truth sidecar and (optional) prediction sidecar.
pub fn frame(gt: &Sidecar, pred: Option<&Sidecar>) -> Result<EvalFrame> {
    let dims = (gt.image.width, gt.image.height);
    let (predictions, pred_masks) = match pred {
        Some(p) => (p.detections("prediction"), p.class_masks()?.unwrap_or_default()),
        None => (Vec::new(), BTreeMap::new()),
    };
    Ok(EvalFrame {
        image_id: gt.image.id.clone(),
        dims,
        predictions,
        pred_masks,
        gt: gt_items(gt),
        gt_masks: gt.class_masks()?,
    })
}

/// Pairs sidecars by image id. Ground-truth images without predictions
/// count as empty predictions; predictions for unknown images are an error.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<MetricsTable> {
    let gt = dataset::list(gt_dir)?;
    let preds: BTreeMap<String, (Sidecar, PathBuf)> = dataset::list(pred_dir)?
        .into_iter()
        .map(|i| (i.sidecar.image.id.clone(), (i.sidecar, i.sidecar_path)))
        .collect();
    for (id, (_, path)) in &preds {
        if !gt.iter().any(|g| g.id() == id) {
            return Err(Error::format(path, format!("no ground truth for image {id:?}")));
        }
    }
    let mut frames = Vec::with_capacity(gt.len());
    for g in &gt {
        let p = preds.get(g.id());
        if let Some((s, path)) = p {
            if (s.image.width, s.image.height) != (g.sidecar.image.width, g.sidecar.image.height) {
                return Err(Error::format(path, "image size differs from the ground truth"));
            }
        }
        frames.push(frame(&g.sidecar, p.map(|(s, _)| s))?);
    }
    evaluate_frames(&frames)
}

pub const CSV_COLUMNS: [&str; 8] = ["Task", "Precision", "Recall", "mAP50", "mAP50:95", "F1-score", "mIoU", "PA"];

/// Writes the table as JSON to `path` and as CSV next to it.
pub fn write_table(path: &Path, table: &MetricsTable) -> Result<PathBuf> {
    write_json(path, table)?;
    let csv_path = path.with_extension("csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |v: f64| format!("{v:.4}");
    let d = &table.detection;
    let mut rows = vec![vec![
        "detection".to_string(),
        fmt(d.precision),
        fmt(d.recall),
        fmt(d.map50),
        fmt(d.map50_95),
        fmt(d.f1),
        String::new(),
        String::new(),
    ]];
    if let Some(s) = &table.segmentation {
        rows.push(vec![
            "segmentation".to_string(),
            fmt(s.precision),
            fmt(s.recall),
            String::new(),
            String::new(),
            fmt(s.f1),
            fmt(s.miou),
            fmt(s.pixel_accuracy),
        ]);
    }
    w.write_record(CSV_COLUMNS).map_err(|e| Error::format(&csv_path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::format(&csv_path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(&csv_path, e))?;
    write_atomic(&csv_path, &bytes)?;
    Ok(csv_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, SidecarImage};
    use facadefixer_core::geometry::BoundingBox;

    fn sidecar(id: &str, boxes: &[(f64, f64, f64, f64, Option<f64>)]) -> Sidecar {
        Sidecar {
            image: SidecarImage {
                id: id.into(),
                width: 100,
                height: 100,
            },
            instances: boxes
                .iter()
                .map(|&(x, y, w, h, c)| Annotation {
                    bbox: BoundingBox::new(x, y, w, h).unwrap(),
                    category: DefectCategory::Crack,
                    confidence: c,
                    mask_rle: None,
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = sidecar("a", &[(10.0, 10.0, 20.0, 20.0, None)]);
        let pred = sidecar("a", &[(10.0, 10.0, 20.0, 20.0, Some(0.9))]);
        let t = evaluate_frames(&[frame(&gt, Some(&pred)).unwrap()]).unwrap();
        assert_eq!(t.detection.precision, 1.0);
        assert_eq!(t.detection.map50_95, 1.0);
        assert!(t.segmentation.is_none());
    }

    #[test]
    fn table_uses_published_column_names() {
        let gt = sidecar("a", &[(10.0, 10.0, 20.0, 20.0, None)]);
        let t = evaluate_frames(&[frame(&gt, None).unwrap()]).unwrap();
        let v = serde_json::to_value(&t).unwrap();
        for k in ["Precision", "Recall", "mAP50", "mAP50:95", "F1-score"] {
            assert!(v["detection"].get(k).is_some(), "{k}");
        }
        let dir = tempfile::tempdir().unwrap();
        let csv = write_table(&dir.path().join("metrics.json"), &t).unwrap();
        let text = std::fs::read_to_string(csv).unwrap();
        assert!(text.starts_with("Task,Precision,Recall,mAP50,mAP50:95,F1-score,mIoU,PA\n"));
    }
}
