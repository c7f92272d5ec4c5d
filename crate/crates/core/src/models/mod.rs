//! The hybrid detection/localization network and the detector-only
//! baselines, all built on a shared backbone implementation.

mod backbone;
mod checkpoint;
mod heads;
pub mod layers;
mod params;

use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneFamily, BackboneSpec};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use heads::{DetectionHead, LocalizationHead};
pub use params::{Init, ParamStore};

use crate::data::{FloodMask, ImageTensor, Normalization};
use crate::error::{Error, Result};

/// Which network to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Backbone feeding both a detection and a localization head.
    Hybrid,
    /// Detector only.
    Plain,
    /// Detector whose input has the mask appended as a fourth channel.
    Cat,
    /// Detector whose input image is multiplied by the mask.
    Mul,
}

/// Input conditioning for the detector-only baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Plain,
    Cat,
    Mul,
}

impl BaselineKind {
    pub fn input_channels(&self) -> usize {
        match self {
            BaselineKind::Cat => 4,
            BaselineKind::Plain | BaselineKind::Mul => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub backbone: BackboneSpec,
    #[serde(default = "default_head_channels")]
    pub head_channels: usize,
}

fn default_head_channels() -> usize {
    256
}

impl ModelSpec {
    pub fn hybrid(backbone: BackboneSpec) -> Self {
        Self {
            kind: ModelKind::Hybrid,
            backbone,
            head_channels: default_head_channels(),
        }
    }

    /// Short display name in the style of the result tables.
    pub fn tag(&self) -> String {
        let base = match self.backbone.family {
            BackboneFamily::Residual50 => "ResNet50",
            BackboneFamily::ResidualTiny => "ResNetTiny",
            BackboneFamily::XceptionLike => "Xception",
        };
        match self.kind {
            ModelKind::Hybrid => format!("{base}_hyb"),
            ModelKind::Plain => base.to_string(),
            ModelKind::Cat => format!("{base}+M (CAT)"),
            ModelKind::Mul => format!("{base}+M (MUL)"),
        }
    }

    pub fn uses_mask_input(&self) -> bool {
        matches!(self.kind, ModelKind::Cat | ModelKind::Mul)
    }
}

/// One image's prediction from the hybrid network.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridOutput {
    pub detection_score: f32,
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width` probabilities.
    pub localization_map: Vec<f32>,
}

impl HybridOutput {
    pub fn binarized(&self, threshold: f32) -> Result<FloodMask> {
        FloodMask::from_probabilities(self.height, self.width, &self.localization_map, threshold)
    }
}

/// Raw tensors produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(N,)` detection logits.
    pub logits: Tensor,
    /// `(N, H, W)` localization probabilities, hybrid models only.
    pub maps: Option<Tensor>,
}

impl ForwardOutput {
    pub fn scores(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits)?)
    }
}

/// Stacks unit or normalized images into an `(N, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), &Device::Cpu)?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

/// Stacks masks into an `(N, 1, H, W)` float tensor of zeros and ones.
pub fn masks_to_tensor(masks: &[FloodMask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.height() != h || m.width() != w {
            return Err(Error::Shape("masks in a batch must share a size".into()));
        }
        data.extend(m.data().iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &Device::Cpu)?)
}

fn check_batch(x: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x
        .dims4()
        .map_err(|_| Error::Shape(format!("expected a 4-d batch, got shape {:?}", x.dims())))?;
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if c != channels {
        return Err(Error::Shape(format!("expected {channels} channels, got {c}")));
    }
    Ok((n, h, w))
}

/// The detection/localization network.
#[derive(Debug)]
pub struct HybridModel {
    spec: ModelSpec,
    store: ParamStore,
    backbone: Backbone,
    detection: DetectionHead,
    localization: LocalizationHead,
    detach_localization: bool,
}

pub fn build_hybrid(backbone: BackboneSpec, head_channels: usize, seed: u64) -> Result<HybridModel> {
    if head_channels == 0 {
        return Err(Error::Config("head_channels must be positive".into()));
    }
    let mut store = ParamStore::new(seed);
    let bb = Backbone::new(&mut store, "backbone", backbone, 3)?;
    let detection = DetectionHead::new(&mut store, backbone.feature_channels)?;
    let localization = LocalizationHead::new(&mut store, backbone.feature_channels, head_channels)?;
    Ok(HybridModel {
        spec: ModelSpec {
            kind: ModelKind::Hybrid,
            backbone,
            head_channels,
        },
        store,
        backbone: bb,
        detection,
        localization,
        detach_localization: false,
    })
}

impl HybridModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// When set, the localization head sees detached features so that its
    /// loss does not reach the backbone.
    pub fn set_detach_localization(&mut self, detach: bool) {
        self.detach_localization = detach;
    }

    pub fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        check_batch(x, 3)?;
        self.backbone.forward_t(x, train)
    }

    pub fn detection_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.detection.forward(features)?)
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<ForwardOutput> {
        let (_, h, w) = check_batch(x, 3)?;
        let features = self.backbone.forward_t(x, train)?;
        let logits = self.detection.forward(&features)?;
        let loc_in = if self.detach_localization {
            features.detach()
        } else {
            features
        };
        let maps = self.localization.forward(&loc_in, h, w)?;
        Ok(ForwardOutput {
            logits,
            maps: Some(maps),
        })
    }
}

/// Runs the hybrid network in inference mode and unpacks per-image outputs.
pub fn forward_hybrid(model: &HybridModel, batch: &Tensor) -> Result<Vec<HybridOutput>> {
    let out = model.forward_t(batch, false)?;
    let scores: Vec<f32> = out.scores()?.to_dtype(DType::F32)?.to_vec1()?;
    let maps = out.maps.expect("hybrid produces maps");
    let (n, h, w) = maps.dims3()?;
    let flat: Vec<f32> = maps.flatten_all()?.to_vec1()?;
    Ok((0..n)
        .map(|i| HybridOutput {
            detection_score: scores[i],
            height: h,
            width: w,
            localization_map: flat[i * h * w..(i + 1) * h * w].to_vec(),
        })
        .collect())
}

/// Detector-only network with optional mask conditioning.
#[derive(Debug)]
pub struct BaselineModel {
    spec: ModelSpec,
    kind: BaselineKind,
    store: ParamStore,
    backbone: Backbone,
    detection: DetectionHead,
    normalization: Normalization,
}

pub fn build_baseline(kind: BaselineKind, backbone: BackboneSpec, seed: u64) -> Result<BaselineModel> {
    let mut store = ParamStore::new(seed);
    let bb = Backbone::new(&mut store, "backbone", backbone, kind.input_channels())?;
    let detection = DetectionHead::new(&mut store, backbone.feature_channels)?;
    let model_kind = match kind {
        BaselineKind::Plain => ModelKind::Plain,
        BaselineKind::Cat => ModelKind::Cat,
        BaselineKind::Mul => ModelKind::Mul,
    };
    Ok(BaselineModel {
        spec: ModelSpec {
            kind: model_kind,
            backbone,
            head_channels: default_head_channels(),
        },
        kind,
        store,
        backbone: bb,
        detection,
        normalization: Normalization::default(),
    })
}

impl BaselineModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Statistics used by the MUL variant to move between domains.
    pub fn set_normalization(&mut self, n: Normalization) {
        self.normalization = n;
    }

    /// Builds the backbone input from a normalized 3-channel batch (or a
    /// 4-channel batch for CAT) and optional `(N, 1, H, W)` masks.
    pub fn prepare_input(&self, x: &Tensor, masks: Option<&Tensor>) -> Result<Tensor> {
        match self.kind {
            BaselineKind::Plain => {
                check_batch(x, 3)?;
                Ok(x.clone())
            }
            BaselineKind::Cat => {
                let (_, c, _, _) = x.dims4()?;
                if c == 4 {
                    return Ok(x.clone());
                }
                let (n, h, w) = check_batch(x, 3)?;
                let m = masks.ok_or(Error::MissingMask)?;
                if m.dims() != [n, 1, h, w] {
                    return Err(Error::Shape(format!("mask batch {:?} does not match images", m.dims())));
                }
                Ok(Tensor::cat(&[x, &m.to_dtype(x.dtype())?], 1)?)
            }
            BaselineKind::Mul => {
                let (n, h, w) = check_batch(x, 3)?;
                let m = masks.ok_or(Error::MissingMask)?;
                if m.dims() != [n, 1, h, w] {
                    return Err(Error::Shape(format!("mask batch {:?} does not match images", m.dims())));
                }
                let dev = x.device();
                let mean = Tensor::new(&self.normalization.mean, dev)?.reshape((1, 3, 1, 1))?;
                let std = Tensor::new(&self.normalization.std, dev)?.reshape((1, 3, 1, 1))?;
                // mask in the unit domain, then standardize again
                let unit = x.broadcast_mul(&std)?.broadcast_add(&mean)?;
                let masked = unit.broadcast_mul(&m.to_dtype(x.dtype())?)?;
                Ok(masked.broadcast_sub(&mean)?.broadcast_div(&std)?)
            }
        }
    }

    pub fn features(&self, x: &Tensor, masks: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let input = self.prepare_input(x, masks)?;
        self.backbone.forward_t(&input, train)
    }

    pub fn detection_logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.detection.forward(features)?)
    }

    pub fn forward_t(&self, x: &Tensor, masks: Option<&Tensor>, train: bool) -> Result<ForwardOutput> {
        let features = self.features(x, masks, train)?;
        Ok(ForwardOutput {
            logits: self.detection.forward(&features)?,
            maps: None,
        })
    }
}

/// Detection scores of a baseline in inference mode.
pub fn forward_baseline(model: &BaselineModel, batch: &Tensor, masks: Option<&Tensor>) -> Result<Vec<f32>> {
    let out = model.forward_t(batch, masks, false)?;
    Ok(out.scores()?.to_dtype(DType::F32)?.to_vec1()?)
}

/// Any trainable network from the model zoo.
#[derive(Debug)]
pub enum Model {
    Hybrid(HybridModel),
    Baseline(BaselineModel),
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec.kind {
            ModelKind::Hybrid => Model::Hybrid(build_hybrid(spec.backbone, spec.head_channels, seed)?),
            ModelKind::Plain => Model::Baseline(build_baseline(BaselineKind::Plain, spec.backbone, seed)?),
            ModelKind::Cat => Model::Baseline(build_baseline(BaselineKind::Cat, spec.backbone, seed)?),
            ModelKind::Mul => Model::Baseline(build_baseline(BaselineKind::Mul, spec.backbone, seed)?),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            Model::Hybrid(m) => m.spec(),
            Model::Baseline(m) => m.spec(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Hybrid(m) => m.store(),
            Model::Baseline(m) => m.store(),
        }
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.store().trainable()
    }

    pub fn is_hybrid(&self) -> bool {
        matches!(self, Model::Hybrid(_))
    }

    pub fn needs_masks(&self) -> bool {
        self.spec().uses_mask_input()
    }

    pub fn forward_t(&self, x: &Tensor, masks: Option<&Tensor>, train: bool) -> Result<ForwardOutput> {
        match self {
            Model::Hybrid(m) => m.forward_t(x, train),
            Model::Baseline(m) => m.forward_t(x, masks, train),
        }
    }

    pub fn features(&self, x: &Tensor, masks: Option<&Tensor>, train: bool) -> Result<Tensor> {
        match self {
            Model::Hybrid(m) => m.features(x, train),
            Model::Baseline(m) => m.features(x, masks, train),
        }
    }

    pub fn detection_logits(&self, features: &Tensor) -> Result<Tensor> {
        match self {
            Model::Hybrid(m) => m.detection_logits(features),
            Model::Baseline(m) => m.detection_logits(features),
        }
    }

    pub fn set_normalization(&mut self, n: Normalization) {
        if let Model::Baseline(m) = self {
            m.set_normalization(n);
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} parameters)", self.spec().tag(), self.store().num_parameters())
    }
}
