use alloc::string::String;

use serde::{Deserialize, Serialize};

use super::DefectCategory;
use crate::error::{Error, Result};

/// Axis-aligned box covering the half-open range `[x, x+w) × [y, y+h)`,
/// origin top-left, y pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width as f64 && self.bottom() <= height as f64
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        if self.fits_within(width, height) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            })
        }
    }

    /// Clips the box to the image frame. `None` when nothing is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<Self> {
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = self.right().clamp(0.0, width as f64);
        let y1 = self.bottom().clamp(0.0, height as f64);
        Self::new(x0, y0, x1 - x0, y1 - y0).ok()
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Integer pixel range `[x0, x1) × [y0, y1)` of pixels whose centers lie in the box.
    pub fn pixel_span(&self) -> (i64, i64, i64, i64) {
        let lo = |v: f64| libm::ceil(v - 0.5) as i64;
        (lo(self.x), lo(self.y), lo(self.right()), lo(self.bottom()))
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection over union of two boxes by continuous area.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A categorized, scored box emitted by one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "bbox")]
    pub bbox: BoundingBox,
    pub category: DefectCategory,
    pub confidence: f64,
    pub source: String,
}

impl Detection {
    pub fn new(bbox: BoundingBox, category: DefectCategory, confidence: f64, source: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Config(alloc::format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            category,
            confidence,
            source: source.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(box_iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)), 1.0);
        assert_eq!(box_iou(&b(0., 0., 10., 10.), &b(20., 20., 5., 5.)), 0.0);
        let v = box_iou(&b(0., 0., 10., 10.), &b(5., 5., 10., 10.));
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(box_iou(&b(0., 0., 10., 10.), &b(10., 0., 10., 10.)), 0.0);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BoundingBox::new(0., 0., 0., 1.).is_err());
        assert!(BoundingBox::new(0., 0., 1., -1.).is_err());
        assert!(BoundingBox::new(f64::NAN, 0., 1., 1.).is_err());
    }

    #[test]
    fn bounds_and_clamp() {
        let bx = b(90., 90., 20., 20.);
        assert!(!bx.fits_within(100, 100));
        assert_eq!(bx.clamp_to(100, 100).unwrap(), b(90., 90., 10., 10.));
        assert!(b(200., 0., 5., 5.).clamp_to(100, 100).is_none());
        assert_eq!(b(2., 3., 4., 5.).pixel_span(), (2, 3, 6, 8));
    }
}
