use candle_core::{Module, Result, Tensor};

use super::layers::{global_avg_pool, upsample_bilinear, Conv2d, Linear};
use super::params::ParamStore;

/// Global average pooling followed by one fully connected layer producing a
/// single logit per image.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    fc: Linear,
}

impl DetectionHead {
    pub const NAME: &'static str = "det_head";

    pub fn new(store: &mut ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, &format!("{}.fc", Self::NAME), channels, 1)?,
        })
    }

    /// `(N, C, h, w)` features to `(N,)` logits.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.fc.forward(&global_avg_pool(features)?)?.squeeze(1)
    }
}

/// 3x3 conv + ReLU + 1x1 conv + sigmoid at feature resolution, then bilinear
/// upsampling to the input grid.
#[derive(Clone, Debug)]
pub struct LocalizationHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl LocalizationHead {
    pub const NAME: &'static str = "loc_head";

    pub fn new(store: &mut ParamStore, channels: usize, head_channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::head(store, &format!("{}.conv1", Self::NAME), channels, head_channels, 3)?,
            conv2: Conv2d::head(store, &format!("{}.conv2", Self::NAME), head_channels, 1, 1)?,
        })
    }

    /// Returns `(N, out_h, out_w)` probabilities.
    pub fn forward(&self, features: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let y = self.conv1.forward(features)?.relu()?;
        let probs = candle_nn::ops::sigmoid(&self.conv2.forward(&y)?)?;
        upsample_bilinear(&probs, out_h, out_w)
    }
}
