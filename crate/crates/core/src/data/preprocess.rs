use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FloodMask, ImageTensor, SampleRecord, ValueDomain};
use crate::error::{Error, Result};
use crate::resample::{resize_bilinear, resize_nearest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
    /// Saturation, brightness, contrast jitter amplitudes.
    pub augment_factors: [f32; 3],
    pub augment_enabled: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
            augment_factors: [0.05, 0.05, 0.05],
            augment_enabled: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::InvalidConfig("target_size must be positive".into()));
        }
        if self.channel_std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::InvalidConfig("channel_std components must be positive".into()));
        }
        if self.augment_factors.iter().any(|&f| !(0.0..1.0).contains(&f)) {
            return Err(Error::InvalidConfig("augment factors must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.channel_mean,
            std: self.channel_std,
        }
    }
}

/// Per-channel standardization `(v - mean_c) / std_c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        PreprocessConfig::default().normalization()
    }
}

impl Normalization {
    pub fn normalize(&self, img: &ImageTensor) -> Result<ImageTensor> {
        if img.domain() != ValueDomain::Unit {
            return Err(Error::InvalidConfig("normalize expects a unit-domain image".into()));
        }
        let data = img
            .data()
            .chunks_exact(3)
            .flat_map(|px| (0..3).map(move |c| (px[c] - self.mean[c]) / self.std[c]))
            .collect();
        ImageTensor::new(img.height(), img.width(), data, ValueDomain::Normalized)
    }

    /// Inverse of [`normalize`](Self::normalize); clamps into the unit domain.
    pub fn denormalize(&self, img: &ImageTensor) -> Result<ImageTensor> {
        if img.domain() != ValueDomain::Normalized {
            return Err(Error::InvalidConfig("denormalize expects a normalized image".into()));
        }
        let data = img
            .data()
            .chunks_exact(3)
            .flat_map(|px| (0..3).map(move |c| px[c] * self.std[c] + self.mean[c]))
            .collect();
        ImageTensor::new(img.height(), img.width(), data, ValueDomain::Unit)
    }
}

/// A model-ready sample.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub image: ImageTensor,
    pub mask: Option<FloodMask>,
    pub label: u8,
}

fn decode_error(path: &Path, e: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| decode_error(path, e))?
        .with_guessed_format()
        .map_err(|e| decode_error(path, e))?
        .decode()
        .map_err(|e| decode_error(path, e))
}

/// Decodes an image file into the unit domain at native resolution.
pub fn load_unit_image(path: &Path) -> Result<ImageTensor> {
    Ok(ImageTensor::from_rgb8(&open(path)?.to_rgb8()))
}

pub fn load_mask(path: &Path) -> Result<FloodMask> {
    Ok(FloodMask::from_gray8(&open(path)?.to_luma8()))
}

/// Resizes a unit-domain image (bilinear) and its mask (nearest) to the
/// configured square size, then standardizes the image.
pub fn preprocess_unit(
    image: &ImageTensor,
    mask: Option<&FloodMask>,
    cfg: &PreprocessConfig,
) -> Result<(ImageTensor, Option<FloodMask>)> {
    let s = cfg.target_size;
    let resized = resize_bilinear(image, s, s);
    let image = cfg.normalization().normalize(&resized)?;
    let mask = mask.map(|m| resize_nearest(m, s, s));
    Ok((image, mask))
}

pub fn load_and_preprocess(record: &SampleRecord, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let image = load_unit_image(&record.image_path)?;
    let mask = record.mask_path.as_deref().map(load_mask).transpose()?;
    let (image, mask) = preprocess_unit(&image, mask.as_ref(), cfg)?;
    Ok(Preprocessed {
        image,
        mask,
        label: record.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Source, Split};
    use image::{GrayImage, RgbImage};

    #[test]
    fn mean_valued_channel_normalizes_to_zero() {
        let img = ImageTensor::constant(5, 7, [0.485, 0.2, 0.9]).unwrap();
        let (out, _) = preprocess_unit(&img, None, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.height(), 224);
        for v in out.channel(0) {
            assert!(v.abs() < 1e-6);
        }
        let expected = (0.2 - 0.456) / 0.224;
        for v in out.channel(1) {
            assert!((v - expected).abs() < 1e-5);
        }
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let img = ImageTensor::from_fn(9, 4, |y, x| [y as f32 / 9.0, x as f32 / 4.0, 0.5]).unwrap();
        let n = Normalization::default();
        let back = n.denormalize(&n.normalize(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rwfi_sized_image_and_mask_resize_to_target() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("a.jpg");
        let mp = dir.path().join("a_mask.png");
        RgbImage::from_fn(512, 385, |x, y| image::Rgb([x as u8, y as u8, 9])).save(&ip).unwrap();
        GrayImage::from_fn(512, 385, |_, y| image::Luma([if y > 200 { 255 } else { 0 }]))
            .save(&mp)
            .unwrap();
        let rec = SampleRecord {
            image_path: ip,
            label: 0,
            mask_path: Some(mp),
            source: Source::Rwfi,
            split: Split::Train,
        };
        let out = load_and_preprocess(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!((out.image.height(), out.image.width()), (224, 224));
        assert_eq!(out.image.data().len(), 224 * 224 * 3);
        let mask = out.mask.unwrap();
        assert_eq!((mask.height(), mask.width()), (224, 224));
        assert!(mask.data().iter().all(|&v| v <= 1));
        assert!(mask.count_ones() > 0);
    }

    #[test]
    fn corrupt_file_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("bad.png");
        std::fs::write(&ip, b"\x89PNG garbage").unwrap();
        let rec = SampleRecord {
            image_path: ip.clone(),
            label: 1,
            mask_path: None,
            source: Source::StreetG,
            split: Split::Test,
        };
        match load_and_preprocess(&rec, &PreprocessConfig::default()) {
            Err(Error::Decode { path, .. }) => assert_eq!(path, ip),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = PreprocessConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.channel_std[1] = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = PreprocessConfig {
            augment_factors: [0.0, 1.0, 0.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
