//! In-memory images used as supervision and render targets.

use crate::error::{Error, Result};
use crate::scene::IDENTITY_DIM;

/// Linear RGB image, row-major, three values per pixel, nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} rgb image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let p = 3 * (y * self.width + x);
        [self.data[p], self.data[p + 1], self.data[p + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let p = 3 * (y * self.width + x);
        self.data[p..p + 3].copy_from_slice(&rgb);
    }

    pub fn check_same_size(&self, width: usize, height: usize) -> Result<()> {
        if (self.width, self.height) != (width, height) {
            return Err(Error::DimensionMismatch(format!(
                "image is {}x{}, expected {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Peak signal-to-noise ratio against `other` for a peak of 1.
    pub fn psnr(&self, other: &RgbImage) -> Result<f64> {
        other.check_same_size(self.width, self.height)?;
        let mse = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len().max(1) as f64;
        Ok(-10.0 * mse.log10())
    }
}

/// Per-pixel category labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn from_labels(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {width}x{height} mask",
                labels.len()
            )));
        }
        for (p, &l) in labels.iter().enumerate() {
            if l as usize >= IDENTITY_DIM {
                return Err(Error::LabelOutOfRange {
                    label: l as u32,
                    x: p % width,
                    y: p / width,
                });
            }
        }
        Ok(Self { width, height, labels })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn check_same_size(&self, width: usize, height: usize) -> Result<()> {
        if (self.width, self.height) != (width, height) {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{}, expected {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}
