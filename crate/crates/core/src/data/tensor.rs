//! In-memory image and mask grids.

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    /// Raw intensities in `[0, 1]`.
    Unit,
    /// Per-channel standardized values.
    Normalized,
}

/// An `H x W x 3` grid stored row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
    domain: ValueDomain,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>, domain: ValueDomain) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        let mut data = data;
        if domain == ValueDomain::Unit {
            for v in data.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            height,
            width,
            data,
            domain,
        })
    }

    /// Builds a unit-domain image from a per-pixel closure returning RGB.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data, ValueDomain::Unit)
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
            domain: ValueDomain::Unit,
        }
    }

    /// Quantizes a unit-domain image to 8 bits with rounding.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Extracts one channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Reassembles an image from three planes of identical size.
    pub fn from_planes(height: usize, width: usize, planes: [Vec<f32>; 3], domain: ValueDomain) -> Result<Self> {
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::Shape("channel planes differ in size".into()));
        }
        let mut data = Vec::with_capacity(n * 3);
        for ((&r, &g), &b) in planes[0].iter().zip(&planes[1]).zip(&planes[2]) {
            data.extend([r, g, b]);
        }
        Self::new(height, width, data, domain)
    }

    /// Applies `f` to every value, keeping the domain. Unit images are re-clamped.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = f(*v);
            if out.domain == ValueDomain::Unit {
                *v = v.clamp(0.0, 1.0);
            }
        }
        out
    }

    pub(crate) fn with_domain(height: usize, width: usize, data: Vec<f32>, domain: ValueDomain) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        Self {
            height,
            width,
            data,
            domain,
        }
    }
}

/// Binary `H x W` mask; 1 marks manipulated (flooded) pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FloodMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl FloodMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask expects {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidConfig("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, data }
    }

    /// Maps 8-bit values `{0, 255}` to `{0, 1}`, thresholding at 128.
    pub fn from_gray8(img: &GrayImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| u8::from(v >= 128)).collect(),
        }
    }

    /// Binarizes a probability map: 1 where `p >= threshold`.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f32], threshold: f32) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::Shape("probability map size mismatch".into()));
        }
        Ok(Self {
            height,
            width,
            data: probs.iter().map(|&p| u8::from(p >= threshold)).collect(),
        })
    }

    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}
