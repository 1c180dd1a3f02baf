//! Image, box and binary-mask primitives.

mod bbox;
mod category;
mod image;
mod mask;
mod rle;

pub use bbox::{box_iou, BoundingBox, Detection};
pub use category::DefectCategory;
pub use image::{ImageRef, RasterImage};
pub use mask::{clip_mask_to_boxes, mask_iou, mask_union, BinaryMask};
pub use rle::Rle;
