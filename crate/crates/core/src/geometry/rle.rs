//! COCO-compatible run-length encoding.
//!
//! Runs are counted over the column-major pixel order and always start with
//! the count of zeros (possibly 0). The string form is the compressed
//! LEB128-like alphabet used by `pycocotools`, so masks round-trip through
//! existing annotation tooling bit-exactly.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Run-length encoded binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rle {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

impl Rle {
    /// Validates the runs against the frame size.
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = height as u64 * width as u64;
        if total != expected {
            return Err(Error::InvalidRle(alloc::format!(
                "runs sum to {total}, frame holds {expected} pixels"
            )));
        }
        Ok(Self { height, width, counts })
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// Compressed COCO string form of the counts.
    pub fn to_coco_string(&self) -> String {
        let mut s = String::new();
        for (i, &cnt) in self.counts.iter().enumerate() {
            let mut x = cnt as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            loop {
                let mut c = (x & 0x1f) as u8;
                x >>= 5;
                let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    c |= 0x20;
                }
                s.push((c + 48) as char);
                if !more {
                    break;
                }
            }
        }
        s
    }

    pub fn from_coco_string(s: &str, height: u32, width: u32) -> Result<Self> {
        let bytes = s.as_bytes();
        let mut counts: Vec<u32> = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let mut x: i64 = 0;
            let mut shift = 0u32;
            loop {
                let Some(&b) = bytes.get(i) else {
                    return Err(Error::InvalidRle("truncated count".into()));
                };
                if !(48..48 + 64).contains(&b) {
                    return Err(Error::InvalidRle(alloc::format!("byte {b:#x} outside the RLE alphabet")));
                }
                if shift > 55 {
                    return Err(Error::InvalidRle("count overflows".into()));
                }
                let c = (b - 48) as i64;
                i += 1;
                x |= (c & 0x1f) << shift;
                shift += 5;
                if c & 0x20 == 0 {
                    if c & 0x10 != 0 {
                        x |= -1i64 << shift;
                    }
                    break;
                }
            }
            if counts.len() > 2 {
                x += counts[counts.len() - 2] as i64;
            }
            let run = u32::try_from(x).map_err(|_| Error::InvalidRle(alloc::format!("run {x} out of range")))?;
            counts.push(run);
        }
        Self::new(height, width, counts)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CountsRepr {
    Compressed(String),
    Plain(Vec<u32>),
}

#[derive(Serialize, Deserialize)]
struct RleRepr {
    size: [u32; 2],
    counts: CountsRepr,
}

impl Serialize for Rle {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        RleRepr {
            size: [self.height, self.width],
            counts: CountsRepr::Compressed(self.to_coco_string()),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Rle {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        let repr = RleRepr::deserialize(deserializer)?;
        let [h, w] = repr.size;
        match repr.counts {
            CountsRepr::Compressed(s) => Rle::from_coco_string(&s, h, w),
            CountsRepr::Plain(c) => Rle::new(h, w, c),
        }
        .map_err(serde::de::Error::custom)
    }
}
