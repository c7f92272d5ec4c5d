//! Colour jitter for training images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageTensor, ValueDomain};
use crate::error::{Error, Result};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn gray(px: &[f32]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

/// Blends each pixel with its own gray level: `g + s * (v - g)`.
pub fn adjust_saturation(img: &ImageTensor, s: f32) -> ImageTensor {
    let mut data = img.data().to_vec();
    for px in data.chunks_exact_mut(3) {
        let g = gray(px);
        for v in px.iter_mut() {
            *v = (g + s * (*v - g)).clamp(0.0, 1.0);
        }
    }
    ImageTensor::with_domain(img.height(), img.width(), data, ValueDomain::Unit)
}

pub fn adjust_brightness(img: &ImageTensor, b: f32) -> ImageTensor {
    img.map(|v| v * b)
}

/// Scales deviations from the image's mean gray level by `c`.
pub fn adjust_contrast(img: &ImageTensor, c: f32) -> ImageTensor {
    let n = (img.height() * img.width()) as f64;
    let mean = (img.data().chunks_exact(3).map(|px| gray(px) as f64).sum::<f64>() / n) as f32;
    img.map(|v| mean + c * (v - mean))
}

/// Multiplies saturation, brightness and contrast (in that order) by factors
/// drawn uniformly from `[1 - f, 1 + f]`. A zero factor leaves that property
/// untouched, so all-zero factors return the input unchanged.
pub fn augment(img: &ImageTensor, factors: [f32; 3], seed: u64) -> Result<ImageTensor> {
    if img.domain() != ValueDomain::Unit {
        return Err(Error::InvalidConfig("augmentation expects a unit-domain image".into()));
    }
    if factors.iter().any(|&f| !(0.0..1.0).contains(&f)) {
        return Err(Error::InvalidConfig(format!("augment factors must lie in [0, 1), got {factors:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // draw all three so each factor's stream does not depend on the others
    let draws: Vec<f32> = factors
        .iter()
        .map(|&f| {
            let u: f32 = rng.random_range(-1.0..=1.0);
            1.0 + f * u
        })
        .collect();
    let mut out = img.clone();
    if factors[0] > 0.0 {
        out = adjust_saturation(&out, draws[0]);
    }
    if factors[1] > 0.0 {
        out = adjust_brightness(&out, draws[1]);
    }
    if factors[2] > 0.0 {
        out = adjust_contrast(&out, draws[2]);
    }
    Ok(out)
}
