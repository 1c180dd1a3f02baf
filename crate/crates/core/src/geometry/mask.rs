use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, Rle};
use crate::error::{Error, Result};

/// H×W binary mask. Stored densely in row-major order; serialized as COCO RLE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Rle", into = "Rle")]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Builds a mask from row-major bits.
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::InvalidRle(alloc::format!(
                "{} bits for a {width}x{height} frame",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    /// Filled rectangle over the pixels whose centers fall inside `b`.
    pub fn from_box(width: u32, height: u32, b: &BoundingBox) -> Self {
        let (x0, y0, x1, y1) = b.pixel_span();
        Self::from_fn(width, height, |x, y| {
            let (x, y) = (x as i64, y as i64);
            x >= x0 && x < x1 && y >= y0 && y < y1
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & !b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check_same_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Tight pixel bounds `(x0, y0, x1, y1)`, exclusive on the right and bottom.
    pub fn tight_bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bounds: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bounds = Some(match bounds {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bounds
    }

    pub fn tight_box(&self) -> Option<BoundingBox> {
        self.tight_bounds().map(|(x0, y0, x1, y1)| BoundingBox {
            x: x0 as f64,
            y: y0 as f64,
            w: (x1 - x0) as f64,
            h: (y1 - y0) as f64,
        })
    }

    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::OutOfBounds {
                x: x as f64,
                y: y as f64,
                w: w as f64,
                h: h as f64,
                width: self.width,
                height: self.height,
            });
        }
        Ok(Self::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy)))
    }

    /// Nearest-neighbour resample, which keeps the mask binary.
    pub fn resize_nearest(&self, width: u32, height: u32) -> Self {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Self::from_fn(width, height, |x, y| {
            let src_x = (libm::floor((x as f64 + 0.5) * sx) as u32).min(self.width - 1);
            let src_y = (libm::floor((y as f64 + 0.5) * sy) as u32).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }

    /// Places `self` into a `width`×`height` zero frame with its origin at `(x, y)`.
    pub fn embed(&self, width: u32, height: u32, x: u32, y: u32) -> Result<Self> {
        if x + self.width > width || y + self.height > height {
            return Err(Error::OutOfBounds {
                x: x as f64,
                y: y as f64,
                w: self.width as f64,
                h: self.height as f64,
                width,
                height,
            });
        }
        let mut out = Self::zeros(width, height);
        for sy in 0..self.height {
            for sx in 0..self.width {
                if self.get(sx, sy) {
                    out.set(x + sx, y + sy, true);
                }
            }
        }
        Ok(out)
    }

    /// Dilation by a square structuring element of side `2·radius + 1`.
    pub fn dilate(&self, radius: u32) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width as usize, self.height as usize);
        let r = radius as usize;
        let mut horiz = vec![false; w * h];
        for y in 0..h {
            let row = &self.bits[y * w..(y + 1) * w];
            let mut prefix = vec![0u32; w + 1];
            for x in 0..w {
                prefix[x + 1] = prefix[x] + row[x] as u32;
            }
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r + 1).min(w);
                horiz[y * w + x] = prefix[hi] > prefix[lo];
            }
        }
        let mut out = vec![false; w * h];
        let mut prefix = vec![0u32; h + 1];
        for x in 0..w {
            for y in 0..h {
                prefix[y + 1] = prefix[y] + horiz[y * w + x] as u32;
            }
            for y in 0..h {
                let lo = y.saturating_sub(r);
                let hi = (y + r + 1).min(h);
                out[y * w + x] = prefix[hi] > prefix[lo];
            }
        }
        Self {
            width: self.width,
            height: self.height,
            bits: out,
        }
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = self.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            height: self.height,
            width: self.width,
            counts,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let checked = Rle::new(rle.height, rle.width, rle.counts.clone())?;
        let (w, h) = (checked.width as usize, checked.height as usize);
        let mut bits = vec![false; w * h];
        let mut idx = 0usize;
        let mut value = false;
        for &run in &checked.counts {
            if value {
                for i in idx..idx + run as usize {
                    let (x, y) = (i / h, i % h);
                    bits[y * w + x] = true;
                }
            }
            idx += run as usize;
            value = !value;
        }
        Ok(Self {
            width: checked.width,
            height: checked.height,
            bits,
        })
    }
}

impl TryFrom<Rle> for BinaryMask {
    type Error = Error;

    fn try_from(rle: Rle) -> Result<Self> {
        BinaryMask::from_rle(&rle)
    }
}

impl From<BinaryMask> for Rle {
    fn from(m: BinaryMask) -> Self {
        m.to_rle()
    }
}

/// Pixel-wise OR of all masks.
pub fn mask_union(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let (first, rest) = masks.split_first().ok_or(Error::Empty("mask list"))?;
    let mut acc = first.clone();
    for m in rest {
        acc.check_same_shape(m)?;
        for (a, &b) in acc.bits.iter_mut().zip(&m.bits) {
            *a |= b;
        }
    }
    Ok(acc)
}

/// `|a ∧ b| / |a ∨ b|`, defined as 1 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_shape(b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += (p && q) as u64;
        union += (p || q) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Keeps only mask pixels that fall inside at least one anchor box.
pub fn clip_mask_to_boxes(mask: &BinaryMask, anchors: &[BoundingBox]) -> Result<BinaryMask> {
    for a in anchors {
        a.check_within(mask.width, mask.height)?;
    }
    let mut allowed = BinaryMask::zeros(mask.width, mask.height);
    for a in anchors {
        let (x0, y0, x1, y1) = a.pixel_span();
        for y in y0.max(0)..y1.min(mask.height as i64) {
            for x in x0.max(0)..x1.min(mask.width as i64) {
                allowed.set(x as u32, y as u32, true);
            }
        }
    }
    mask.and(&allowed)
}
