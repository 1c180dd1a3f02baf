//! PNG encode/decode for [`RasterImage`].

use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use facadefixer_core::geometry::RasterImage;
use image::{ImageFormat, RgbImage};

use crate::error::{read, write_atomic, Error, Result};

pub fn encode_png(image: &RasterImage) -> Vec<u8> {
    let (w, h) = image.dims();
    let buf = RgbImage::from_raw(w, h, image.as_bytes().to_vec()).expect("raster buffer matches its dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<RasterImage, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RasterImage::new(w, h, rgb.into_raw()).map_err(|e| e.to_string())
}

pub fn read_png(path: &Path) -> Result<RasterImage> {
    decode_png(&read(path)?).map_err(|e| Error::format(path, e))
}

pub fn write_png(path: &Path, image: &RasterImage) -> Result<()> {
    write_atomic(path, &encode_png(image))
}

pub fn to_base64_png(image: &RasterImage) -> String {
    base64::engine::general_purpose::STANDARD.encode(encode_png(image))
}

pub fn from_base64_png(data: &str) -> std::result::Result<RasterImage, String> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| e.to_string())?;
    decode_png(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let pixels: Vec<u8> = (0..7 * 5 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = RasterImage::new(7, 5, pixels).unwrap();
        assert_eq!(decode_png(&encode_png(&img)).unwrap(), img);
        assert_eq!(from_base64_png(&to_base64_png(&img)).unwrap(), img);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode_png(b"not a png").is_err());
    }
}
