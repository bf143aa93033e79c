//! Color spaces and image containers.
//!
//! Images are small f64 buffers: RGB in [0,1], CIELAB with L in [0,100] and
//! a/b in [-128,128], masks in [0,1]. Conversions follow the sRGB transfer
//! function and the D65 white point; see [`convert`] for the exact constants
//! and the normalization used to feed Lab planes to the network.

mod analysis;
mod convert;
mod png;

pub use analysis::{
    channel_change_stats, channel_change_stats_rgb, channel_correlation, CorrelationReport,
};
pub use convert::{
    lab_pixel_to_rgb, lab_to_rgb, linear_to_srgb, normalize_lab_channels, rgb_pixel_to_lab,
    rgb_to_lab, srgb_to_linear, D65_WHITE,
};
pub(crate) use convert::{normlab_pixel_to_rgb, normlab_pixel_vjp};
pub use png::{load_mask_png, load_rgb_png, save_gray_png, save_mask_png, save_rgb_png};

use crate::{Error, Result};

/// RGB image, components interleaved row-major, each in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                op: "RgbImage::new",
                detail: format!("{}x{} wants {} values, got {}", height, width, height * width * 3, data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite()) {
            return Err(Error::OutOfRange {
                what: "rgb component",
                detail: format!("{} is outside [0,1]", v),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, px: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }
}

/// CIELAB image, (L, a, b) interleaved row-major. Construction clamps L to
/// [0,100] and a/b to [-128,128].
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LabImage {
    pub fn new(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                op: "LabImage::new",
                detail: format!("{}x{} wants {} values, got {}", height, width, height * width * 3, data.len()),
            });
        }
        for (i, v) in data.iter_mut().enumerate() {
            *v = if i % 3 == 0 { v.clamp(0.0, 100.0) } else { v.clamp(-128.0, 128.0) };
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, px: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = px[0].clamp(0.0, 100.0);
        self.data[i + 1] = px[1].clamp(-128.0, 128.0);
        self.data[i + 2] = px[2].clamp(-128.0, 128.0);
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Single-channel mask in [0,1]; foreground is mask > 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "Mask::new",
                detail: format!("{}x{} wants {} values, got {}", height, width, height * width, data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite()) {
            return Err(Error::OutOfRange {
                what: "mask value",
                detail: format!("{} is outside [0,1]", v),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.data.iter().filter(|&&v| v > 0.5).count();
        fg as f64 / self.data.len() as f64
    }
}
