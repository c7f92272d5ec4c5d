//! Image-processing attacks applied to unit-domain test images before the
//! standard preprocessing: JPEG re-compression, downscaling, median filtering,
//! Gaussian blur and additive Gaussian noise.

use std::collections::BTreeMap;
use std::fmt;

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, ValueDomain};
use crate::error::{Error, Result};
use crate::resample::resize_bilinear;

/// Encoder settings recorded alongside JPEG-attacked results, since quality
/// scales are encoder specific.
pub const JPEG_ENCODER_INFO: &str = "jpeg-encoder 0.7, baseline sequential, 4:2:0 chroma, standard tables";

pub const DEFAULT_BLUR_SIGMA: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    None,
    Jpeg,
    ResizeDown,
    Median,
    GaussianBlur,
    GaussianNoise,
}

impl AttackName {
    fn defaults(&self) -> &'static [(&'static str, f64)] {
        match self {
            AttackName::None => &[],
            AttackName::Jpeg => &[("quality", 50.0)],
            AttackName::ResizeDown => &[("factor", 0.5)],
            AttackName::Median => &[("window", 3.0)],
            AttackName::GaussianBlur => &[("window", 3.0), ("sigma", DEFAULT_BLUR_SIGMA)],
            AttackName::GaussianNoise => &[("mean", 0.0), ("variance", 0.003)],
        }
    }
}

/// A named attack with its parameters. Serializes as
/// `{"name": "jpeg", "params": {"quality": 50}, "seed": 0}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub name: AttackName,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    /// The attack with every parameter at its default value.
    pub fn new(name: AttackName) -> Self {
        Self {
            name,
            params: BTreeMap::new(),
            seed: 0,
        }
        .resolved()
        .expect("defaults are valid")
    }

    pub fn none() -> Self {
        Self::new(AttackName::None)
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Fills missing parameters with defaults and rejects unknown ones.
    pub fn resolved(&self) -> Result<Self> {
        let defaults = self.name.defaults();
        if let Some(k) = self.params.keys().find(|k| !defaults.iter().any(|(d, _)| d == k)) {
            return Err(Error::InvalidConfig(format!("attack {:?} has no parameter `{k}`", self.name)));
        }
        let mut out = self.clone();
        for (k, v) in defaults {
            out.params.entry(k.to_string()).or_insert(*v);
        }
        Ok(out)
    }

    pub fn is_none(&self) -> bool {
        self.name == AttackName::None
    }

    fn param(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .copied()
            .or_else(|| self.name.defaults().iter().find(|(k, _)| *k == key).map(|(_, v)| *v))
            .ok_or_else(|| Error::InvalidConfig(format!("missing attack parameter `{key}`")))
    }

    fn integer_param(&self, key: &str) -> Result<usize> {
        let v = self.param(key)?;
        if v.fract() != 0.0 || v < 0.0 {
            return Err(Error::InvalidConfig(format!("attack parameter `{key}` must be a non-negative integer")));
        }
        Ok(v as usize)
    }

    /// Compact label such as `jpeg(quality=50)`; `none` for the identity.
    pub fn tag(&self) -> String {
        if self.is_none() {
            return "none".into();
        }
        let resolved = self.resolved().unwrap_or_else(|_| self.clone());
        let params: Vec<String> = resolved.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", serde_json::to_value(self.name).unwrap().as_str().unwrap(), params.join(","))
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

fn require_unit(img: &ImageTensor) -> Result<()> {
    if img.domain() != ValueDomain::Unit {
        return Err(Error::InvalidConfig("attacks operate on unit-domain images".into()));
    }
    Ok(())
}

/// 8-bit quantization, JPEG round trip at `quality`, rescale to `[0, 1]`.
pub fn jpeg_compress(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    require_unit(img)?;
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidConfig(format!("JPEG quality must be in [1, 100], got {quality}")));
    }
    let (w, h) = (img.width(), img.height());
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::InvalidConfig("image too large for JPEG".into()));
    }
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    let mut encoder = Encoder::new(&mut buf, quality);
    encoder.set_sampling_factor(SamplingFactor::F_2_2);
    encoder
        .encode(rgb.as_raw(), w as u16, h as u16, ColorType::Rgb)
        .map_err(|e| Error::InvalidConfig(format!("JPEG encoding failed: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?.to_rgb8();
    Ok(ImageTensor::from_rgb8(&decoded))
}

/// Bilinear downscaling to `(floor(f*H), floor(f*W))`.
pub fn resize_down(img: &ImageTensor, factor: f64) -> Result<ImageTensor> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::InvalidConfig(format!("resize factor must be in (0, 1], got {factor}")));
    }
    let h = (factor * img.height() as f64).floor() as usize;
    let w = (factor * img.width() as f64).floor() as usize;
    if h == 0 || w == 0 {
        return Err(Error::InvalidConfig(format!(
            "resizing {}x{} by {factor} leaves an empty image",
            img.height(),
            img.width()
        )));
    }
    Ok(resize_bilinear(img, h, w))
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn check_window(window: usize, min: usize) -> Result<()> {
    if window.is_multiple_of(2) || window < min {
        return Err(Error::InvalidConfig(format!("window must be odd and at least {min}, got {window}")));
    }
    Ok(())
}

/// Per-channel median over a `window x window` neighbourhood, reflect padding.
pub fn median_filter(img: &ImageTensor, window: usize) -> Result<ImageTensor> {
    require_unit(img)?;
    check_window(window, 3)?;
    let (h, w) = (img.height(), img.width());
    let r = (window / 2) as isize;
    let mut out = Vec::with_capacity(h * w * 3);
    let mut buf = Vec::with_capacity(window * window);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.clear();
                for dy in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        buf.push(img.get(yy, reflect(x as isize + dx, w), c));
                    }
                }
                let mid = buf.len() / 2;
                let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                out.push(*m);
            }
        }
    }
    ImageTensor::new(h, w, out, ValueDomain::Unit)
}

/// Normalized 1-D Gaussian taps of length `window`.
pub fn gaussian_kernel(window: usize, sigma: f64) -> Result<Vec<f64>> {
    check_window(window, 1)?;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let r = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &ImageTensor, window: usize, sigma: f64) -> Result<ImageTensor> {
    require_unit(img)?;
    let k = gaussian_kernel(window, sigma)?;
    let (h, w) = (img.height(), img.width());
    let r = (window / 2) as isize;
    let mut horiz = vec![0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                horiz[(y * w + x) * 3 + c] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * img.get(y, reflect(x as isize + i as isize - r, w), c) as f64)
                    .sum();
            }
        }
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * horiz[(reflect(y as isize + i as isize - r, h) * w + x) * 3 + c])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    ImageTensor::new(h, w, out, ValueDomain::Unit)
}

/// The i.i.d. Gaussian samples [`gaussian_noise`] adds, before clamping.
pub fn noise_field(len: usize, mean: f64, variance: f64, seed: u64) -> Result<Vec<f32>> {
    if variance.is_nan() || variance < 0.0 || !mean.is_finite() {
        return Err(Error::InvalidConfig(format!("noise variance must be non-negative, got {variance}")));
    }
    let dist = Normal::new(mean, variance.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| dist.sample(&mut rng) as f32).collect())
}

/// Adds Gaussian noise and clamps the result to `[0, 1]`.
pub fn gaussian_noise(img: &ImageTensor, mean: f64, variance: f64, seed: u64) -> Result<ImageTensor> {
    require_unit(img)?;
    let noise = noise_field(img.data().len(), mean, variance, seed)?;
    let data = img.data().iter().zip(&noise).map(|(v, n)| (v + n).clamp(0.0, 1.0)).collect();
    ImageTensor::new(img.height(), img.width(), data, ValueDomain::Unit)
}

/// Mixes a base seed with an image index into an independent per-image seed.
pub fn per_image_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn apply_attack(spec: &AttackSpec, img: &ImageTensor) -> Result<ImageTensor> {
    apply_attack_indexed(spec, img, 0)
}

/// Dispatches to the named operator. The noise operator draws from
/// `per_image_seed(spec.seed, index)`.
pub fn apply_attack_indexed(spec: &AttackSpec, img: &ImageTensor, index: usize) -> Result<ImageTensor> {
    require_unit(img)?;
    let spec = spec.resolved()?;
    match spec.name {
        AttackName::None => Ok(img.clone()),
        AttackName::Jpeg => {
            let q = spec.integer_param("quality")?;
            if q > 100 {
                return Err(Error::InvalidConfig(format!("JPEG quality must be in [1, 100], got {q}")));
            }
            jpeg_compress(img, q as u8)
        }
        AttackName::ResizeDown => resize_down(img, spec.param("factor")?),
        AttackName::Median => median_filter(img, spec.integer_param("window")?),
        AttackName::GaussianBlur => gaussian_blur(img, spec.integer_param("window")?, spec.param("sigma")?),
        AttackName::GaussianNoise => gaussian_noise(
            img,
            spec.param("mean")?,
            spec.param("variance")?,
            per_image_seed(spec.seed, index),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn natural_like(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |y, x| {
            let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
            [
                0.5 + 0.3 * (6.0 * fx).sin() * (4.0 * fy).cos(),
                0.4 + 0.3 * fy,
                0.6 - 0.25 * (3.0 * (fx + fy)).sin(),
            ]
        })
        .unwrap()
    }

    fn psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.data().len() as f64;
        10.0 * (1.0 / mse).log10()
    }

    fn lcg_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut s = seed;
        ImageTensor::from_fn(h, w, |_, _| {
            let mut next = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / (1u64 << 24) as f32
            };
            [next(), next(), next()]
        })
        .unwrap()
    }

    #[test]
    fn jpeg_quality_100_is_high_fidelity_and_shape_preserving() {
        let img = natural_like(64, 80);
        let out = jpeg_compress(&img, 100).unwrap();
        assert_eq!((out.height(), out.width()), (64, 80));
        assert!(psnr(&img, &out) > 40.0, "{}", psnr(&img, &out));
    }

    #[test]
    fn jpeg_quality_monotone() {
        let img = natural_like(64, 64);
        let p30 = psnr(&img, &jpeg_compress(&img, 30).unwrap());
        let p90 = psnr(&img, &jpeg_compress(&img, 90).unwrap());
        assert!(p90 > p30);
        assert!(jpeg_compress(&img, 0).is_err());
        assert!(jpeg_compress(&img, 101).is_err());
    }

    #[test]
    fn resize_down_dimensions() {
        let img = ImageTensor::constant(512, 512, [0.3, 0.6, 0.9]).unwrap();
        let half = resize_down(&img, 0.5).unwrap();
        assert_eq!((half.height(), half.width()), (256, 256));
        assert!(half.data().chunks(3).all(|p| (p[0] - 0.3).abs() < 1e-6 && (p[2] - 0.9).abs() < 1e-6));
        assert_eq!(resize_down(&img, 1.0).unwrap(), img);
        let tiny = ImageTensor::constant(3, 3, [0.0; 3]).unwrap();
        assert!(resize_down(&tiny, 0.2).is_err());
        assert!(resize_down(&img, 0.0).is_err());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-2, 2), 0);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn median_constant_and_salt() {
        let flat = ImageTensor::constant(9, 9, [0.25, 0.5, 0.75]).unwrap();
        assert_eq!(median_filter(&flat, 3).unwrap(), flat);
        let salted = ImageTensor::from_fn(9, 9, |y, x| if (y, x) == (4, 4) { [1.0; 3] } else { [0.25, 0.5, 0.75] }).unwrap();
        assert_eq!(median_filter(&salted, 3).unwrap(), flat);
        assert!(median_filter(&flat, 4).is_err());
    }

    #[test]
    fn median_matches_sort_oracle() {
        let img = lcg_image(8, 8, 11);
        let out = median_filter(&img, 3).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let mut v = Vec::new();
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let mirror = |i: i32| if i < 0 { -i } else if i > 7 { 14 - i } else { i } as usize;
                            v.push(img.get(mirror(y as i32 + dy), mirror(x as i32 + dx), c));
                        }
                    }
                    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    assert_eq!(out.get(y, x, c), v[4]);
                }
            }
        }
    }

    #[test]
    fn blur_kernel_and_constant_image() {
        let k = gaussian_kernel(3, DEFAULT_BLUR_SIGMA).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(k[1] > k[0] && (k[0] - k[2]).abs() < 1e-15);
        let flat = ImageTensor::constant(7, 5, [0.1, 0.2, 0.3]).unwrap();
        let out = gaussian_blur(&flat, 3, DEFAULT_BLUR_SIGMA).unwrap();
        for (a, b) in flat.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(gaussian_blur(&flat, 2, 0.8).is_err());
        assert!(gaussian_blur(&flat, 3, 0.0).is_err());
    }

    #[test]
    fn blur_reduces_total_variation() {
        let tv = |img: &ImageTensor| {
            let mut t = 0.0f64;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    for c in 0..3 {
                        if x + 1 < img.width() {
                            t += (img.get(y, x + 1, c) - img.get(y, x, c)).abs() as f64;
                        }
                        if y + 1 < img.height() {
                            t += (img.get(y + 1, x, c) - img.get(y, x, c)).abs() as f64;
                        }
                    }
                }
            }
            t
        };
        let img = lcg_image(32, 32, 5);
        assert!(tv(&gaussian_blur(&img, 3, DEFAULT_BLUR_SIGMA).unwrap()) <= tv(&img));
    }

    #[test]
    fn noise_identity_determinism_and_errors() {
        let img = natural_like(16, 16);
        assert_eq!(gaussian_noise(&img, 0.0, 0.0, 1).unwrap(), img);
        let a = gaussian_noise(&img, 0.0, 0.003, 9).unwrap();
        assert_eq!(a, gaussian_noise(&img, 0.0, 0.003, 9).unwrap());
        assert_ne!(a, gaussian_noise(&img, 0.0, 0.003, 10).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gaussian_noise(&img, 0.0, -0.1, 0).is_err());
    }

    #[test]
    fn spec_json_shape_and_dispatch() {
        let spec: AttackSpec = serde_json::from_str(r#"{"name": "jpeg", "params": {"quality": 50}, "seed": 0}"#).unwrap();
        assert_eq!(spec, AttackSpec::new(AttackName::Jpeg));
        let img = natural_like(24, 24);
        assert_eq!(apply_attack(&spec, &img).unwrap(), jpeg_compress(&img, 50).unwrap());
        assert_eq!(apply_attack(&AttackSpec::none(), &img).unwrap(), img);
        let noise = AttackSpec::new(AttackName::GaussianNoise);
        assert_eq!(noise.params["variance"], 0.003);
        assert!(serde_json::from_str::<AttackSpec>(r#"{"name": "posterize"}"#).is_err());
        let bad = AttackSpec::none().with_param("quality", 3.0);
        assert!(apply_attack(&bad, &img).is_err());
        assert_eq!(AttackSpec::new(AttackName::Median).tag(), "median(window=3)");
    }

    #[test]
    fn operators_keep_channels_and_only_resize_changes_size() {
        let img = natural_like(20, 30);
        for name in [AttackName::Jpeg, AttackName::Median, AttackName::GaussianBlur, AttackName::GaussianNoise] {
            let out = apply_attack(&AttackSpec::new(name), &img).unwrap();
            assert_eq!((out.height(), out.width()), (20, 30), "{name:?}");
        }
        let out = apply_attack(&AttackSpec::new(AttackName::ResizeDown), &img).unwrap();
        assert_eq!((out.height(), out.width()), (10, 15));
    }
}
