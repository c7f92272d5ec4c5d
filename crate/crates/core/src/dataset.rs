//! Sample sources feeding the trainer and the evaluator, and batch collation.

use candle_core::{Device, Tensor};

use crate::data::{augment, load_mask, load_unit_image, preprocess_unit, FloodMask, PreprocessConfig, Preprocessed, SampleRecord};
use crate::error::{Error, Result};
use crate::models::{images_to_tensor, masks_to_tensor};
use crate::robustness::{apply_attack_indexed, per_image_seed, AttackSpec};

/// Random-access collection of model-ready samples.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Label of sample `index` without decoding it.
    fn label(&self, index: usize) -> u8;

    /// Whether sample `index` carries a ground-truth mask.
    fn has_mask(&self, index: usize) -> bool;

    /// Loads sample `index`; `epoch` seeds any stochastic augmentation.
    fn sample(&self, index: usize, epoch: usize) -> Result<Preprocessed>;
}

/// Samples already decoded and preprocessed.
#[derive(Clone, Debug, Default)]
pub struct InMemorySource {
    pub samples: Vec<Preprocessed>,
}

impl InMemorySource {
    pub fn new(samples: Vec<Preprocessed>) -> Self {
        Self { samples }
    }
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.samples[index].label
    }

    fn has_mask(&self, index: usize) -> bool {
        self.samples[index].mask.is_some()
    }

    fn sample(&self, index: usize, _epoch: usize) -> Result<Preprocessed> {
        Ok(self.samples[index].clone())
    }
}

/// Lazily decodes manifest records: optional attack at native resolution,
/// optional colour jitter, then resize and standardization.
#[derive(Clone, Debug)]
pub struct RecordSource {
    records: Vec<SampleRecord>,
    cfg: PreprocessConfig,
    augment: bool,
    attack: Option<AttackSpec>,
    seed: u64,
}

impl RecordSource {
    pub fn new(records: Vec<SampleRecord>, cfg: PreprocessConfig) -> Self {
        Self {
            records,
            cfg,
            augment: false,
            attack: None,
            seed: 0,
        }
    }

    /// Enables colour jitter (if the config allows it), seeded per `(seed, epoch, index)`.
    pub fn with_augmentation(mut self, seed: u64) -> Self {
        self.augment = true;
        self.seed = seed;
        self
    }

    pub fn with_attack(mut self, attack: Option<AttackSpec>) -> Self {
        self.attack = attack.filter(|a| !a.is_none());
        self
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }
}

impl SampleSource for RecordSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.records[index].label
    }

    fn has_mask(&self, index: usize) -> bool {
        self.records[index].mask_path.is_some()
    }

    fn sample(&self, index: usize, epoch: usize) -> Result<Preprocessed> {
        let rec = &self.records[index];
        let mut image = load_unit_image(&rec.image_path)?;
        if let Some(attack) = &self.attack {
            image = apply_attack_indexed(attack, &image, index)?;
        }
        if self.augment && self.cfg.augment_enabled {
            let seed = per_image_seed(per_image_seed(self.seed, epoch), index);
            image = augment(&image, self.cfg.augment_factors, seed)?;
        }
        let mask = rec.mask_path.as_deref().map(load_mask).transpose()?;
        let (image, mask) = preprocess_unit(&image, mask.as_ref(), &self.cfg)?;
        Ok(Preprocessed {
            image,
            mask,
            label: rec.label,
        })
    }
}

/// How ground-truth masks enter a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Masks are not collated.
    Ignore,
    /// Every sample must carry a mask.
    Required,
    /// Samples without a mask receive an all-zeros mask.
    ZeroFillMissing,
    /// Real samples always receive all zeros; fakes must carry a mask.
    ZerosForReal,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `(N, 3, H, W)` normalized images.
    pub images: Tensor,
    /// `(N, 1, H, W)` masks in `{0, 1}` when collated.
    pub masks: Option<Tensor>,
    /// `(N,)` labels as f32.
    pub labels: Tensor,
}

pub fn collate(samples: &[Preprocessed], policy: MaskPolicy) -> Result<Batch> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let images = images_to_tensor(&images)?;
    let (_, _, h, w) = images.dims4()?;
    let masks = match policy {
        MaskPolicy::Ignore => None,
        _ => {
            let mut masks = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let m = match (&s.mask, policy) {
                    (_, MaskPolicy::ZerosForReal) if s.label == 0 => FloodMask::zeros(h, w),
                    (Some(m), _) => m.clone(),
                    (None, MaskPolicy::ZeroFillMissing) => FloodMask::zeros(h, w),
                    (None, _) => {
                        return Err(Error::TrainConfig(format!(
                            "sample {i} (label {}) has no ground-truth mask",
                            s.label
                        )))
                    }
                };
                masks.push(m);
            }
            Some(masks_to_tensor(&masks)?)
        }
    };
    let labels: Vec<f32> = samples.iter().map(|s| s.label as f32).collect();
    Ok(Batch {
        images,
        masks,
        labels: Tensor::new(labels.as_slice(), &Device::Cpu)?,
    })
}

/// Loads `indices` from `source` and collates them.
pub fn load_batch(source: &dyn SampleSource, indices: &[usize], epoch: usize, policy: MaskPolicy) -> Result<(Vec<Preprocessed>, Batch)> {
    let samples = indices
        .iter()
        .map(|&i| source.sample(i, epoch))
        .collect::<Result<Vec<_>>>()?;
    let batch = collate(&samples, policy)?;
    Ok((samples, batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageTensor;
    use crate::data::Normalization;

    fn sample(label: u8, mask: bool) -> Preprocessed {
        let img = ImageTensor::constant(4, 4, [0.5; 3]).unwrap();
        Preprocessed {
            image: Normalization::default().normalize(&img).unwrap(),
            mask: mask.then(|| FloodMask::from_fn(4, 4, |y, _| y < 2)),
            label,
        }
    }

    #[test]
    fn collate_shapes() {
        let b = collate(&[sample(0, true), sample(1, true)], MaskPolicy::Required).unwrap();
        assert_eq!(b.images.dims(), &[2, 3, 4, 4]);
        assert_eq!(b.masks.unwrap().dims(), &[2, 1, 4, 4]);
        assert_eq!(b.labels.to_vec1::<f32>().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn mask_policies() {
        assert!(collate(&[sample(0, false)], MaskPolicy::Required).is_err());
        let b = collate(&[sample(0, false), sample(1, true)], MaskPolicy::ZeroFillMissing).unwrap();
        let m: Vec<f32> = b.masks.unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(m[..16].iter().sum::<f32>(), 0.0);
        assert_eq!(m[16..].iter().sum::<f32>(), 8.0);
        let b = collate(&[sample(0, true)], MaskPolicy::ZerosForReal).unwrap();
        assert_eq!(b.masks.unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert!(collate(&[sample(1, false)], MaskPolicy::ZerosForReal).is_err());
        assert!(collate(&[sample(1, false)], MaskPolicy::Ignore).unwrap().masks.is_none());
    }
}
