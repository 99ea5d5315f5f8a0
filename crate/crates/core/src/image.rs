//! In-memory image type used across the crate.
//!
//! Pixels are stored planar (all of channel 0, then channel 1, ...), each
//! plane row-major. Every value lives in [0, 1]; constructors enforce the
//! range so downstream transforms never have to re-check it.

use crate::error::{Error, Result};

/// A height x width x channels pixel array with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an image, validating shape and pixel range.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(Error::Consistency(format!(
                "pixel buffer holds {} values, shape {height}x{width}x{channels} needs {expected}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p) || p.is_nan()) {
            return Err(Error::Argument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image from raw values, clipping each into [0, 1] first.
    /// Used by transforms whose intermediate math can leave the range
    /// (inverse DCT, filters).
    pub fn from_unclipped(
        height: usize,
        width: usize,
        channels: usize,
        mut pixels: Vec<f64>,
    ) -> Result<Image> {
        for p in &mut pixels {
            *p = p.clamp(0.0, 1.0);
        }
        Image::new(height, width, channels, pixels)
    }

    /// A constant-valued image; handy in tests and STRIP blending checks.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Image> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// (height, width, channels) triple.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Full planar pixel buffer.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// One channel plane, row-major.
    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[channel * n..(channel + 1) * n]
    }

    /// Pixel at (channel, row, col).
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.pixels[(channel * self.height + row) * self.width + col]
    }

    /// True when both images have the same shape.
    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }
}
