//! Feature extractors: a 50-layer bottleneck residual network, a reduced
//! residual network for desk-scale runs, and a depthwise-separable
//! (Xception-style) network for the baseline comparisons.

use candle_core::{Module, Result, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{max_pool_3x3_s2, BatchNorm2d, Conv2d, SeparableConv};
use super::params::ParamStore;
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    Residual50,
    ResidualTiny,
    XceptionLike,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub output_stride: usize,
    pub feature_channels: usize,
}

impl BackboneSpec {
    pub fn residual50() -> Self {
        Self {
            family: BackboneFamily::Residual50,
            output_stride: 32,
            feature_channels: 2048,
        }
    }

    pub fn residual_tiny(output_stride: usize, feature_channels: usize) -> Self {
        Self {
            family: BackboneFamily::ResidualTiny,
            output_stride,
            feature_channels,
        }
    }

    /// Xception-style network; widths scale with `feature_channels / 2048`.
    pub fn xception_like(feature_channels: usize) -> Self {
        Self {
            family: BackboneFamily::XceptionLike,
            output_stride: 32,
            feature_channels,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.feature_channels == 0 {
            return Err(Error::Config("feature_channels must be positive".into()));
        }
        match self.family {
            BackboneFamily::Residual50 => {
                if self.output_stride != 32 || self.feature_channels != 2048 {
                    return Err(Error::Config(
                        "residual50 has output_stride 32 and 2048 feature channels".into(),
                    ));
                }
            }
            BackboneFamily::XceptionLike => {
                if self.output_stride != 32 {
                    return Err(Error::Config("xception_like has output_stride 32".into()));
                }
            }
            BackboneFamily::ResidualTiny => {
                if !self.output_stride.is_power_of_two() || self.output_stride > 32 {
                    return Err(Error::Config(format!(
                        "residual_tiny output_stride must be a power of two up to 32, got {}",
                        self.output_stride
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that an input of `h x w` produces an integral feature grid.
    pub fn check_input(&self, h: usize, w: usize) -> crate::Result<()> {
        if !h.is_multiple_of(self.output_stride) || !w.is_multiple_of(self.output_stride) {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by output stride {}",
                self.output_stride
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::backbone(store, &format!("{name}.conv"), c_in, c_out, k, stride)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, width: usize, stride: usize) -> Result<Self> {
        let c_out = width * 4;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(store, &format!("{name}.downsample"), c_in, c_out, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            reduce: ConvBn::new(store, &format!("{name}.reduce"), c_in, width, 1, 1)?,
            spatial: ConvBn::new(store, &format!("{name}.spatial"), width, width, 3, stride)?,
            expand: ConvBn::new(store, &format!("{name}.expand"), width, c_out, 1, 1)?,
            shortcut,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.reduce.forward_t(x, train)?.relu()?;
        let y = self.spatial.forward_t(&y, train)?.relu()?;
        let y = self.expand.forward_t(&y, train)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward_t(x, train)?,
            None => x.clone(),
        };
        (y + skip)?.relu()
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(store, &format!("{name}.downsample"), c_in, c_out, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            first: ConvBn::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride)?,
            second: ConvBn::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1)?,
            shortcut,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.first.forward_t(x, train)?.relu()?;
        let y = self.second.forward_t(&y, train)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward_t(x, train)?,
            None => x.clone(),
        };
        (y + skip)?.relu()
    }
}

#[derive(Clone, Debug)]
struct SepBn {
    sep: SeparableConv,
    bn: BatchNorm2d,
}

impl SepBn {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            sep: SeparableConv::new(store, &format!("{name}.sep"), c_in, c_out)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.sep.forward(x)?, train)
    }
}

/// Xception block: a stack of (ReLU, separable conv, BN) units, optionally
/// followed by stride-2 max pooling, plus a residual connection.
#[derive(Clone, Debug)]
struct XceptionBlock {
    units: Vec<SepBn>,
    relu_first: bool,
    downsample: bool,
    shortcut: Option<ConvBn>,
}

impl XceptionBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        relu_first: bool,
        downsample: bool,
    ) -> Result<Self> {
        let units = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| SepBn::new(store, &format!("{name}.unit{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let (c_in, c_out) = (widths[0], *widths.last().expect("non-empty widths"));
        let shortcut = if downsample || c_in != c_out {
            let stride = if downsample { 2 } else { 1 };
            Some(ConvBn::new(store, &format!("{name}.skip"), c_in, c_out, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            units,
            relu_first,
            downsample,
            shortcut,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for (i, unit) in self.units.iter().enumerate() {
            if i > 0 || self.relu_first {
                y = y.relu()?;
            }
            y = unit.forward_t(&y, train)?;
        }
        if self.downsample {
            y = max_pool_3x3_s2(&y)?;
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward_t(x, train)?,
            None => x.clone(),
        };
        y + skip
    }
}

#[derive(Clone, Debug)]
enum Body {
    Residual50 {
        stem: ConvBn,
        stages: Vec<Bottleneck>,
    },
    ResidualTiny {
        stem: ConvBn,
        blocks: Vec<BasicBlock>,
    },
    Xception {
        stem: Vec<ConvBn>,
        blocks: Vec<XceptionBlock>,
        exit: Vec<SepBn>,
    },
}

/// A convolutional feature extractor mapping `(N, C_in, H, W)` to
/// `(N, feature_channels, H / stride, W / stride)`.
#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    in_channels: usize,
    body: Body,
}

const XCEPTION_MIDDLE_BLOCKS: usize = 8;

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, spec: BackboneSpec, in_channels: usize) -> crate::Result<Self> {
        spec.validate()?;
        let body = match spec.family {
            BackboneFamily::Residual50 => {
                let stem = ConvBn::new(store, &format!("{name}.stem"), in_channels, 64, 7, 2)?;
                let mut stages = Vec::new();
                let mut c_in = 64;
                for (s, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
                    for b in 0..depth {
                        let stride = if b == 0 && s > 0 { 2 } else { 1 };
                        stages.push(Bottleneck::new(store, &format!("{name}.layer{}.{b}", s + 1), c_in, width, stride)?);
                        c_in = width * 4;
                    }
                }
                Body::Residual50 { stem, stages }
            }
            BackboneFamily::ResidualTiny => {
                let c = spec.feature_channels;
                let stem = ConvBn::new(store, &format!("{name}.stem"), in_channels, c, 3, 1)?;
                let n_down = spec.output_stride.trailing_zeros() as usize;
                let blocks = if n_down == 0 {
                    vec![BasicBlock::new(store, &format!("{name}.block0"), c, c, 1)?]
                } else {
                    (0..n_down)
                        .map(|i| BasicBlock::new(store, &format!("{name}.block{i}"), c, c, 2))
                        .collect::<Result<Vec<_>>>()?
                };
                Body::ResidualTiny { stem, blocks }
            }
            BackboneFamily::XceptionLike => {
                let scale = |c: usize| ((c * spec.feature_channels) / 2048).max(1);
                let stem = vec![
                    ConvBn::new(store, &format!("{name}.stem0"), in_channels, scale(32), 3, 2)?,
                    ConvBn::new(store, &format!("{name}.stem1"), scale(32), scale(64), 3, 1)?,
                ];
                let mut blocks = vec![
                    XceptionBlock::new(store, &format!("{name}.entry0"), &[scale(64), scale(128), scale(128)], false, true)?,
                    XceptionBlock::new(store, &format!("{name}.entry1"), &[scale(128), scale(256), scale(256)], true, true)?,
                    XceptionBlock::new(store, &format!("{name}.entry2"), &[scale(256), scale(728), scale(728)], true, true)?,
                ];
                for i in 0..XCEPTION_MIDDLE_BLOCKS {
                    let w = scale(728);
                    blocks.push(XceptionBlock::new(store, &format!("{name}.middle{i}"), &[w, w, w, w], true, false)?);
                }
                blocks.push(XceptionBlock::new(
                    store,
                    &format!("{name}.exit0"),
                    &[scale(728), scale(728), scale(1024)],
                    true,
                    true,
                )?);
                let exit = vec![
                    SepBn::new(store, &format!("{name}.exit1"), scale(1024), scale(1536))?,
                    SepBn::new(store, &format!("{name}.exit2"), scale(1536), spec.feature_channels)?,
                ];
                Body::Xception { stem, blocks, exit }
            }
        };
        Ok(Self {
            spec,
            in_channels,
            body,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> crate::Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {c}", self.in_channels)));
        }
        self.spec.check_input(h, w)?;
        let y = match &self.body {
            Body::Residual50 { stem, stages } => {
                let mut y = max_pool_3x3_s2(&stem.forward_t(x, train)?.relu()?)?;
                for block in stages {
                    y = block.forward_t(&y, train)?;
                }
                y
            }
            Body::ResidualTiny { stem, blocks } => {
                let mut y = stem.forward_t(x, train)?.relu()?;
                for block in blocks {
                    y = block.forward_t(&y, train)?;
                }
                y
            }
            Body::Xception { stem, blocks, exit } => {
                let mut y = x.clone();
                for s in stem {
                    y = s.forward_t(&y, train)?.relu()?;
                }
                for block in blocks {
                    y = block.forward_t(&y, train)?;
                }
                for e in exit {
                    y = e.forward_t(&y, train)?.relu()?;
                }
                y
            }
        };
        Ok(y)
    }
}
