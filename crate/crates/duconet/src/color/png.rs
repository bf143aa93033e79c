//! 8-bit PNG load/save for images and masks.

use std::path::Path;

use crate::Result;

use super::{Mask, RgbImage};

pub fn load_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    RgbImage::new(h, w, data)
}

pub fn save_rgb_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let buf: Vec<u8> = img.pixels().iter().map(|&v| quantize(v)).collect();
    let out = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .expect("buffer sized from image");
    out.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Mask::new(h, w, data)
}

pub fn save_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    save_gray_png(path, mask.values(), mask.height(), mask.width())
}

/// Saves a [0,1] plane as 8-bit grayscale, values linearly mapped to 0..255.
pub fn save_gray_png(path: impl AsRef<Path>, values: &[f64], height: usize, width: usize) -> Result<()> {
    assert_eq!(values.len(), height * width, "plane size mismatch");
    let buf: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    let out = image::GrayImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer sized from dimensions");
    out.save(path)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
