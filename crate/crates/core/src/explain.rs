//! Gradient-weighted class activation maps for the detection logit and
//! side-by-side panels of inputs, masks and CAM overlays.

use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var, D};
use image::{Rgb, RgbImage};

use crate::data::{FloodMask, ImageTensor};
use crate::error::{Error, Result};
use crate::models::layers::upsample_bilinear;
use crate::models::{images_to_tensor, masks_to_tensor, Model};

/// Model interface needed for CAM: the deepest spatial feature map and the
/// detection logit as a function of it.
pub trait CamTarget {
    /// Features for an `(N, C_in, H, W)` batch; `(N, C, h, w)` when spatial.
    fn cam_features(&self, x: &Tensor, masks: Option<&Tensor>) -> Result<Tensor>;

    /// `(N,)` pre-sigmoid detection logits from features.
    fn cam_logits(&self, features: &Tensor) -> Result<Tensor>;
}

impl CamTarget for Model {
    fn cam_features(&self, x: &Tensor, masks: Option<&Tensor>) -> Result<Tensor> {
        self.features(x, masks, false)
    }

    fn cam_logits(&self, features: &Tensor) -> Result<Tensor> {
        self.detection_logits(features)
    }
}

/// A min-max normalized map over the input grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub data: Vec<f32>,
    /// What the map explains.
    pub target: String,
}

impl Heatmap {
    /// Min-max normalizes `raw`; a constant map becomes all zeros.
    pub fn normalized(height: usize, width: usize, raw: &[f32], target: &str) -> Result<Self> {
        if raw.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", raw.len())));
        }
        let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let data = if hi > lo {
            raw.iter().map(|&v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Ok(Self {
            height,
            width,
            data,
            target: target.to_string(),
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// CAM of the detection logit for one normalized image (plus its mask for
/// mask-conditioned baselines).
pub fn cam_map(model: &dyn CamTarget, image: &ImageTensor, mask: Option<&FloodMask>) -> Result<Heatmap> {
    let (h, w) = (image.height(), image.width());
    let x = images_to_tensor(std::slice::from_ref(image))?;
    let m = mask.map(|m| masks_to_tensor(std::slice::from_ref(m))).transpose()?;
    let feats = model.cam_features(&x, m.as_ref())?;
    let dims = feats.dims().to_vec();
    if dims.len() != 4 {
        return Err(Error::Unsupported(format!(
            "CAM needs spatial (N, C, h, w) features, model gives {dims:?}"
        )));
    }
    let feats = Var::from_tensor(&feats.detach())?;
    let logit = model.cam_logits(feats.as_tensor())?.sum_all()?;
    let grads = logit.backward()?;
    let g = match grads.get(feats.as_tensor()) {
        Some(g) => g.clone(),
        None => feats.as_tensor().zeros_like()?,
    };
    let weights = g.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let cam = feats
        .as_tensor()
        .broadcast_mul(&weights)?
        .sum_keepdim(1)?
        .relu()?;
    let up = upsample_bilinear(&cam, h, w)?;
    let raw: Vec<f32> = up.flatten_all()?.to_vec1()?;
    Heatmap::normalized(h, w, &raw, "detection_logit")
}

/// Blue-cyan-yellow-red ramp over `[0, 1]`.
pub fn color_ramp(t: f32) -> [f32; 3] {
    const STOPS: [(f32, [f32; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.4, 1.0]),
        (0.5, [0.0, 0.9, 0.9]),
        (0.75, [1.0, 0.9, 0.0]),
        (1.0, [0.8, 0.0, 0.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for pair in STOPS.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if t <= t1 {
            let a = (t - t0) / (t1 - t0);
            return [0, 1, 2].map(|i| c0[i] + a * (c1[i] - c0[i]));
        }
    }
    STOPS[4].1
}

/// Blends the ramp colour over the image with opacity `0.5 * h`, so a zero
/// heatmap leaves the image untouched and the peak sits at 50%.
pub fn overlay(image: &ImageTensor, heat: &Heatmap) -> Result<ImageTensor> {
    if image.height() != heat.height || image.width() != heat.width {
        return Err(Error::Shape("heatmap and image sizes differ".into()));
    }
    ImageTensor::from_fn(image.height(), image.width(), |y, x| {
        let h = heat.get(y, x);
        let a = 0.5 * h;
        let c = color_ramp(h);
        [0, 1, 2].map(|k| (1.0 - a) * image.get(y, x, k) + a * c[k])
    })
}

fn mask_rgb(m: &FloodMask) -> RgbImage {
    RgbImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        let v = if m.get(y as usize, x as usize) == 1 { 255 } else { 0 };
        Rgb([v, v, v])
    })
}

/// Horizontal panel: input | ground truth | prediction | CAM overlay. The
/// prediction column is left out when `pred` is `None`.
pub fn compose_panel(
    image: &ImageTensor,
    gt: &FloodMask,
    pred: Option<&FloodMask>,
    heat: &Heatmap,
) -> Result<RgbImage> {
    let (h, w) = (image.height(), image.width());
    let same = |m: &FloodMask| m.height() == h && m.width() == w;
    if !same(gt) || pred.is_some_and(|p| !same(p)) {
        return Err(Error::Shape("panel inputs must share a size".into()));
    }
    let mut tiles = vec![image.to_rgb8(), mask_rgb(gt)];
    if let Some(p) = pred {
        tiles.push(mask_rgb(p));
    }
    tiles.push(overlay(image, heat)?.to_rgb8());
    let mut panel = RgbImage::new((w * tiles.len()) as u32, h as u32);
    for (i, tile) in tiles.iter().enumerate() {
        image::imageops::replace(&mut panel, tile, (i * w) as i64, 0);
    }
    Ok(panel)
}

/// `{stem}_{tag}_panel.png` with characters unsafe in file names replaced.
pub fn panel_file_name(stem: &str, model_tag: &str) -> String {
    let tag: String = model_tag
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "_-+.".contains(c) { c } else { '_' })
        .collect();
    format!("{stem}_{tag}_panel.png")
}

/// Renders the panel and writes it as PNG into `out_dir`.
pub fn render_panel(
    image: &ImageTensor,
    gt: &FloodMask,
    pred: Option<&FloodMask>,
    heat: &Heatmap,
    out_dir: &Path,
    stem: &str,
    model_tag: &str,
) -> Result<PathBuf> {
    let panel = compose_panel(image, gt, pred, heat)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(panel_file_name(stem, model_tag));
    panel.save_with_format(&path, image::ImageFormat::Png)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Features are the input itself; the logit is the mean of channel 0
    /// over the top-left quadrant.
    struct QuadrantStub;

    impl CamTarget for QuadrantStub {
        fn cam_features(&self, x: &Tensor, _: Option<&Tensor>) -> Result<Tensor> {
            Ok(x.clone())
        }

        fn cam_logits(&self, f: &Tensor) -> Result<Tensor> {
            let (_, _, h, w) = f.dims4()?;
            Ok(f.narrow(1, 0, 1)?.narrow(2, 0, h / 2)?.narrow(3, 0, w / 2)?.mean_keepdim(3)?.mean_keepdim(2)?.flatten_all()?)
        }
    }

    fn quadrant_image() -> ImageTensor {
        ImageTensor::from_fn(16, 16, |y, x| {
            let inside = y < 8 && x < 8;
            [if inside { 0.9 } else { 0.05 }, 0.5, 0.5]
        })
        .unwrap()
    }

    #[test]
    fn stub_cam_concentrates_on_region() {
        let heat = cam_map(&QuadrantStub, &quadrant_image(), None).unwrap();
        assert_eq!((heat.height, heat.width), (16, 16));
        let total: f32 = heat.data.iter().sum();
        let inside: f32 = (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).map(|(y, x)| heat.get(y, x)).sum();
        assert!(inside / total > 0.8, "{}", inside / total);
        assert!((heat.data.iter().copied().fold(0.0, f32::max) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cam_ignores_constant_logit_offset() {
        struct Shifted;
        impl CamTarget for Shifted {
            fn cam_features(&self, x: &Tensor, m: Option<&Tensor>) -> Result<Tensor> {
                QuadrantStub.cam_features(x, m)
            }
            fn cam_logits(&self, f: &Tensor) -> Result<Tensor> {
                Ok((QuadrantStub.cam_logits(f)? + 3.5)?)
            }
        }
        let a = cam_map(&QuadrantStub, &quadrant_image(), None).unwrap();
        let b = cam_map(&Shifted, &quadrant_image(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_spatial_features_unsupported() {
        struct Flat;
        impl CamTarget for Flat {
            fn cam_features(&self, x: &Tensor, _: Option<&Tensor>) -> Result<Tensor> {
                Ok(x.flatten_from(1)?)
            }
            fn cam_logits(&self, f: &Tensor) -> Result<Tensor> {
                Ok(f.mean(1)?)
            }
        }
        let err = cam_map(&Flat, &quadrant_image(), None).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn normalization_idempotent_and_constant_maps_zero() {
        let h = Heatmap::normalized(1, 4, &[2.0, 4.0, 3.0, 6.0], "t").unwrap();
        assert_eq!(h.data, vec![0.0, 0.5, 0.25, 1.0]);
        assert_eq!(Heatmap::normalized(1, 4, &h.data, "t").unwrap(), h);
        assert_eq!(Heatmap::normalized(1, 2, &[7.0, 7.0], "t").unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_heatmap_overlay_is_plain_image() {
        let img = quadrant_image();
        let heat = Heatmap::normalized(16, 16, &[1.0; 256], "t").unwrap();
        assert_eq!(overlay(&img, &heat).unwrap(), img);
    }

    #[test]
    fn panel_layout_and_round_trip() {
        let img = quadrant_image();
        let gt = FloodMask::from_fn(16, 16, |y, x| y < 8 && x < 8);
        let heat = Heatmap::normalized(16, 16, &(0..256).map(|v| v as f32).collect::<Vec<_>>(), "t").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = render_panel(&img, &gt, Some(&gt), &heat, dir.path(), "img_01", "ResNet50_hyb").unwrap();
        assert!(path.ends_with("img_01_ResNet50_hyb_panel.png"));
        let decoded = image::open(&path).unwrap().to_rgb8();
        assert_eq!(decoded.dimensions(), (64, 16));
        assert_eq!(decoded, compose_panel(&img, &gt, Some(&gt), &heat).unwrap());
        let three = compose_panel(&img, &gt, None, &heat).unwrap();
        assert_eq!(three.width(), 48);
        let bad = FloodMask::zeros(8, 8);
        assert!(compose_panel(&img, &bad, None, &heat).is_err());
    }
}
