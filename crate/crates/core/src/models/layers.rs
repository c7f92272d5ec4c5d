//! Differentiable building blocks on top of candle tensors (NCHW layout).

use candle_core::{Module, Result, Tensor, Var, D};

use super::params::{Init, ParamStore};
use crate::resample::bilinear_matrix;

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Backbone convolution: He-normal weights, no bias (a norm layer follows).
    pub fn backbone(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.param(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::KaimingNormal { fan_in },
        )?;
        Ok(Self {
            weight,
            bias: None,
            stride,
            padding: kernel / 2,
        })
    }

    /// Head convolution with bias and fan-in uniform initialization.
    pub fn head(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.param(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::FanInUniform { fan_in },
        )?;
        let bias = store.param(&format!("{name}.bias"), &[c_out], Init::FanInUniform { fan_in })?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over `(N, H, W)` with running statistics kept as
/// buffers. Training mode normalizes with batch statistics and updates the
/// running estimates with momentum 0.1 (unbiased variance).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.weight"), &[channels], Init::Const(1.0))?,
            beta: store.param(&format!("{name}.bias"), &[channels], Init::Const(0.0))?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(1)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean.flatten_all()?, var.flatten_all()?)
        } else {
            (
                self.running_mean.as_tensor().clone(),
                self.running_var.as_tensor().clone(),
            )
        };
        let shape = (1, c, 1, 1);
        let scale = (var + self.eps)?.sqrt()?.recip()?.mul(self.gamma.as_tensor())?;
        let shift = self.beta.as_tensor().sub(&mean.mul(&scale)?)?;
        x.broadcast_mul(&scale.reshape(shape)?)?
            .broadcast_add(&shift.reshape(shape)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let init = Init::FanInUniform { fan_in: c_in };
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[c_out, c_in], init)?,
            bias: store.param(&format!("{name}.bias"), &[c_out], init)?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())
    }
}

/// Depthwise 3x3 convolution (stride 1, zero padding 1) written as a sum of
/// shifted, channel-scaled copies of the input.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3x3 {
    weight: Var,
}

impl DepthwiseConv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[channels, 3, 3], Init::KaimingNormal { fan_in: 9 })?,
        })
    }
}

impl Module for DepthwiseConv3x3 {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut acc: Option<Tensor> = None;
        for dy in 0..3 {
            for dx in 0..3 {
                let k = self
                    .weight
                    .as_tensor()
                    .narrow(1, dy, 1)?
                    .narrow(2, dx, 1)?
                    .reshape((1, c, 1, 1))?;
                let term = padded.narrow(2, dy, h)?.narrow(3, dx, w)?.broadcast_mul(&k)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        Ok(acc.expect("nine taps"))
    }
}

/// Depthwise 3x3 followed by pointwise 1x1.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    depthwise: DepthwiseConv3x3,
    pointwise: Conv2d,
}

impl SeparableConv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            depthwise: DepthwiseConv3x3::new(store, &format!("{name}.depthwise"), c_in)?,
            pointwise: Conv2d::backbone(store, &format!("{name}.pointwise"), c_in, c_out, 1, 1)?,
        })
    }
}

impl Module for SeparableConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise.forward(x)?)
    }
}

/// Picks indices `start, start + 2, ...` (`count` of them) along `dim`.
fn every_second(x: &Tensor, dim: usize, start: usize, count: usize) -> Result<Tensor> {
    let part = x.narrow(dim, start, 2 * count)?.contiguous()?;
    let mut shape = part.dims().to_vec();
    shape[dim] = count;
    shape.insert(dim + 1, 2);
    part.reshape(shape)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)
}

/// 3x3 max pooling with stride 2 and padding 1, built from strided views and
/// element-wise maxima so that it stays differentiable. Edge replication is
/// equivalent to ignoring padded cells because each window covers the edge.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let out_h = (h - 1) / 2 + 1;
    let out_w = (w - 1) / 2 + 1;
    let padded = x.pad_with_same(2, 1, 2)?.pad_with_same(3, 1, 2)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        let rows = every_second(&padded, 2, dy, out_h)?;
        for dx in 0..3 {
            let tap = every_second(&rows, 3, dx, out_w)?;
            acc = Some(match acc {
                Some(a) => a.maximum(&tap)?,
                None => tap,
            });
        }
    }
    Ok(acc.expect("nine taps"))
}

/// Bilinear upsampling of `(N, 1, h, w)` maps to `(N, H, W)` via the separable
/// interpolation matrices, `R_y · M · R_xᵀ`.
pub fn upsample_bilinear(maps: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = maps.dims4()?;
    debug_assert_eq!(c, 1);
    let dev = maps.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(maps.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(maps.dtype())?;
    let m = maps.contiguous()?.reshape((n, h, w))?;
    ry.broadcast_left(n)?
        .contiguous()?
        .matmul(&m)?
        .matmul(&rx.t()?.broadcast_left(n)?.contiguous()?)
}

/// Mean over the spatial dimensions: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean(D::Minus1)?.mean(D::Minus1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn ramp(shape: (usize, usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|i| ((i * 37) % 101) as f32 / 10.0).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn naive_max_pool(x: &Tensor) -> Vec<f32> {
        let (n, c, h, w) = x.dims4().unwrap();
        let v: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let mut out = Vec::new();
        for b in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let y = (2 * oy + ky) as isize - 1;
                            let xx = (2 * ox + kx) as isize - 1;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                m = m.max(v[b * h * w + y as usize * w + xx as usize]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }

    #[test]
    fn max_pool_matches_naive_even_and_odd() {
        for shape in [(2, 3, 8, 8), (1, 2, 7, 9), (1, 1, 112, 112)] {
            let x = ramp(shape);
            let got: Vec<f32> = max_pool_3x3_s2(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(got, naive_max_pool(&x), "{shape:?}");
        }
    }

    #[test]
    fn max_pool_is_differentiable() {
        let x = Var::from_tensor(&ramp((1, 1, 6, 6))).unwrap();
        let y = max_pool_3x3_s2(x.as_tensor()).unwrap().sum_all().unwrap();
        let g = y.backward().unwrap();
        let gx: Vec<f32> = g.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let total: f32 = gx.iter().sum();
        assert!((total - 9.0).abs() < 1e-5, "one unit of gradient per output cell, got {total}");
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let mut store = ParamStore::new(1);
        let dw = DepthwiseConv3x3::new(&mut store, "dw", 4).unwrap();
        let x = ramp((2, 4, 5, 6));
        let ours = dw.forward(&x).unwrap();
        let k = dw.weight.as_tensor().reshape((4, 1, 3, 3)).unwrap();
        let reference = x.conv2d(&k, 1, 1, 1, 4).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let m = Tensor::full(0.3f32, (2, 1, 7, 7), &Device::Cpu).unwrap();
        let up = upsample_bilinear(&m, 224, 224).unwrap();
        assert_eq!(up.dims(), &[2, 224, 224]);
        let v: Vec<f32> = up.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| (x - 0.3).abs() < 1e-6));
    }

    #[test]
    fn upsample_matches_plane_resize() {
        let m = ramp((1, 1, 4, 3));
        let up: Vec<f32> = upsample_bilinear(&m, 16, 12).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let src: Vec<f32> = m.flatten_all().unwrap().to_vec1().unwrap();
        let reference = crate::resample::resize_plane(&src, 4, 3, 16, 12);
        for (a, b) in up.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_tracks() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm2d::new(&mut store, "bn", 3).unwrap();
        let x = ramp((4, 3, 5, 5));
        let y = bn.forward_t(&x, true).unwrap();
        let per_channel = y.transpose(0, 1).unwrap().reshape((3, 100)).unwrap();
        let means: Vec<f32> = per_channel.mean(1).unwrap().to_vec1().unwrap();
        assert!(means.iter().all(|m| m.abs() < 1e-4));
        let rm: Vec<f32> = bn.running_mean.as_tensor().to_vec1().unwrap();
        assert!(rm.iter().all(|&m| m > 0.0));
        let eval = bn.forward_t(&x, false).unwrap();
        assert_eq!(eval.dtype(), DType::F32);
    }
}
