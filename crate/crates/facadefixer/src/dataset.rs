//! Dataset directories: `<stem>.png` images with `<stem>.json` annotation
//! sidecars.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use facadefixer_core::geometry::{mask_union, BinaryMask, BoundingBox, DefectCategory, Detection, ImageRef, RasterImage, Rle};
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, Error, Result};
use crate::imageio::{read_png, write_png};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarImage {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub category: DefectCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<Rle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub image: SidecarImage,
    pub instances: Vec<Annotation>,
}

impl Sidecar {
    pub fn check(&self) -> std::result::Result<(), String> {
        let SidecarImage { width, height, .. } = self.image;
        if width == 0 || height == 0 {
            return Err("zero-area image".into());
        }
        for (i, a) in self.instances.iter().enumerate() {
            a.bbox
                .check_within(width, height)
                .map_err(|e| format!("instances[{i}].bbox: {e}"))?;
            if let Some(c) = a.confidence {
                if !(0.0..=1.0).contains(&c) {
                    return Err(format!("instances[{i}].confidence {c} outside [0, 1]"));
                }
            }
            if let Some(rle) = &a.mask_rle {
                if (rle.width, rle.height) != (width, height) {
                    return Err(format!("instances[{i}].mask_rle does not match the image size"));
                }
            }
        }
        Ok(())
    }

    pub fn image_ref(&self, uri: &str) -> Result<ImageRef> {
        Ok(ImageRef::new(self.image.id.clone(), uri, self.image.width, self.image.height)?)
    }

    /// Annotations as detections; missing confidences count as 1.
    pub fn detections(&self, source: &str) -> Vec<Detection> {
        self.instances
            .iter()
            .map(|a| Detection {
                bbox: a.bbox,
                category: a.category,
                confidence: a.confidence.unwrap_or(1.0),
                source: source.into(),
            })
            .collect()
    }

    /// Union of the annotated masks per category; `None` when instances
    /// exist but none carries a mask. An image without instances is an
    /// all-background frame.
    pub fn class_masks(&self) -> Result<Option<BTreeMap<DefectCategory, BinaryMask>>> {
        let mut by_class: BTreeMap<DefectCategory, Vec<BinaryMask>> = BTreeMap::new();
        let mut any = false;
        for a in &self.instances {
            if let Some(rle) = &a.mask_rle {
                any = true;
                by_class.entry(a.category).or_default().push(BinaryMask::from_rle(rle)?);
            }
        }
        if !any && !self.instances.is_empty() {
            return Ok(None);
        }
        let mut out = BTreeMap::new();
        for (c, masks) in by_class {
            out.insert(c, mask_union(&masks)?);
        }
        Ok(Some(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub sidecar: Sidecar,
    pub sidecar_path: PathBuf,
    pub image_path: PathBuf,
}

impl DatasetItem {
    pub fn id(&self) -> &str {
        &self.sidecar.image.id
    }

    /// Reference whose uri is the image's file name, so that nothing
    /// derived from it depends on where the dataset lives.
    pub fn image_ref(&self) -> Result<ImageRef> {
        let name = self.image_path.file_name().unwrap_or_default().to_string_lossy();
        self.sidecar.image_ref(&name)
    }

    /// Loads the pixels, checking them against the sidecar's size.
    pub fn load_image(&self) -> Result<RasterImage> {
        let img = read_png(&self.image_path)?;
        let SidecarImage { width, height, .. } = self.sidecar.image;
        if img.dims() != (width, height) {
            return Err(Error::format(
                &self.image_path,
                format!("image is {}x{}, sidecar says {width}x{height}", img.width(), img.height()),
            ));
        }
        Ok(img)
    }
}

/// Lists the sidecars in `dir` in file-name order.
pub fn list(dir: &Path) -> Result<Vec<DatasetItem>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
        .collect();
    paths.sort();
    let mut items = Vec::with_capacity(paths.len());
    let mut seen = BTreeMap::new();
    for sidecar_path in paths {
        let sidecar: Sidecar = read_json(&sidecar_path)?;
        sidecar.check().map_err(|e| Error::format(&sidecar_path, e))?;
        if let Some(prev) = seen.insert(sidecar.image.id.clone(), sidecar_path.clone()) {
            return Err(Error::format(
                &sidecar_path,
                format!("image id {:?} already used by {}", sidecar.image.id, prev.display()),
            ));
        }
        items.push(DatasetItem {
            image_path: sidecar_path.with_extension("png"),
            sidecar,
            sidecar_path,
        });
    }
    Ok(items)
}

/// Writes `<dir>/<stem>.png` and `<dir>/<stem>.json`.
pub fn write_item(dir: &Path, stem: &str, image: &RasterImage, sidecar: &Sidecar) -> Result<()> {
    write_png(&dir.join(format!("{stem}.png")), image)?;
    write_json(&dir.join(format!("{stem}.json")), sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sidecar() -> Sidecar {
        let mask = BinaryMask::from_box(8, 6, &BoundingBox::new(1.0, 1.0, 3.0, 2.0).unwrap());
        Sidecar {
            image: SidecarImage {
                id: "s1".into(),
                width: 8,
                height: 6,
            },
            instances: vec![Annotation {
                bbox: BoundingBox::new(1.0, 1.0, 3.0, 2.0).unwrap(),
                category: DefectCategory::Spalling,
                confidence: None,
                mask_rle: Some(mask.to_rle()),
            }],
        }
    }

    #[test]
    fn sidecar_json_shape() {
        let v = serde_json::to_value(sidecar()).unwrap();
        assert_eq!(v["image"]["id"], "s1");
        assert_eq!(v["instances"][0]["bbox"], serde_json::json!([1.0, 1.0, 3.0, 2.0]));
        assert_eq!(v["instances"][0]["category"], "spalling");
        assert!(v["instances"][0].get("confidence").is_none());
        assert_eq!(v["instances"][0]["mask_rle"]["size"], serde_json::json!([6, 8]));
    }

    #[test]
    fn write_then_list() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::filled(8, 6, [1, 2, 3]).unwrap();
        write_item(dir.path(), "s1", &img, &sidecar()).unwrap();
        let items = list(dir.path()).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].sidecar, sidecar());
        assert_eq!(items[0].load_image().unwrap(), img);
        let masks = items[0].sidecar.class_masks().unwrap().unwrap();
        assert_eq!(masks[&DefectCategory::Spalling].count(), 6);
    }

    #[test]
    fn out_of_bounds_annotation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sidecar();
        s.instances[0].bbox = BoundingBox::new(6.0, 1.0, 3.0, 2.0).unwrap();
        write_json(&dir.path().join("bad.json"), &s).unwrap();
        assert!(list(dir.path()).is_err());
    }
}
