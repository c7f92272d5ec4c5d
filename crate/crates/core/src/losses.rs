//! Binary cross-entropy losses for the detection and localization tasks and
//! their weighted combination.
//!
//! Both losses are the negated mean log-likelihood of Bernoulli predictions,
//! so they are non-negative and minimized by perfect predictions.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_det: f64,
    pub lambda_loc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_det: 0.4,
            lambda_loc: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_det) || !ok(self.lambda_loc) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if self.lambda_det == 0.0 && self.lambda_loc == 0.0 {
            return Err(Error::InvalidConfig("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

fn bce_mean(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let targets = targets.to_dtype(probs.dtype())?;
    let p = probs.clamp(EPS, 1.0 - EPS)?;
    let pos = targets.mul(&p.log()?)?;
    let neg = targets.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok(pos.add(&neg)?.mean_all()?.neg()?)
}

/// Mean binary cross-entropy between `(N,)` detection scores and labels.
pub fn detection_loss(scores: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if scores.dims() != labels.dims() || scores.rank() != 1 {
        return Err(Error::Shape(format!(
            "scores {:?} and labels {:?} must be matching vectors",
            scores.dims(),
            labels.dims()
        )));
    }
    if scores.dims()[0] == 0 {
        return Err(Error::Shape("detection loss needs at least one sample".into()));
    }
    bce_mean(scores, labels)
}

/// Mean binary cross-entropy over all `N x H x W` pixels.
pub fn localization_loss(maps: &Tensor, gt_masks: &Tensor) -> Result<Tensor> {
    if maps.dims() != gt_masks.dims() || maps.rank() != 3 {
        return Err(Error::Shape(format!(
            "maps {:?} and masks {:?} must be matching N x H x W grids",
            maps.dims(),
            gt_masks.dims()
        )));
    }
    if maps.elem_count() == 0 {
        return Err(Error::Shape("localization loss needs at least one pixel".into()));
    }
    bce_mean(maps, gt_masks)
}

/// `lambda_det * l_det + lambda_loc * l_loc`.
pub fn total_loss(l_det: f64, l_loc: f64, w: &LossWeights) -> f64 {
    w.lambda_det * l_det + w.lambda_loc * l_loc
}

/// Tensor form of [`total_loss`]; a missing localization term counts as zero.
pub fn total_loss_tensor(l_det: &Tensor, l_loc: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    let det = (l_det * w.lambda_det)?;
    Ok(match l_loc {
        Some(loc) => (det + (loc * w.lambda_loc)?)?,
        None => det,
    })
}

/// Slice convenience over [`detection_loss`], evaluated in f64.
pub fn detection_loss_values(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let s = Tensor::new(scores, &Device::Cpu)?;
    let l = Tensor::new(labels, &Device::Cpu)?.to_dtype(DType::F64)?;
    Ok(detection_loss(&s, &l)?.to_scalar::<f64>()?)
}

/// Slice convenience over [`localization_loss`] for `n` maps of `h x w`.
pub fn localization_loss_values(maps: &[f64], masks: &[u8], n: usize, h: usize, w: usize) -> Result<f64> {
    if maps.len() != n * h * w || masks.len() != n * h * w {
        return Err(Error::Shape("map/mask length does not match n*h*w".into()));
    }
    let m = Tensor::from_slice(maps, (n, h, w), &Device::Cpu)?;
    let g = Tensor::from_slice(masks, (n, h, w), &Device::Cpu)?.to_dtype(DType::F64)?;
    Ok(localization_loss(&m, &g)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_detection_is_near_zero() {
        let l = detection_loss_values(&[1.0 - EPS], &[1]).unwrap();
        assert!((0.0..1e-6).contains(&l), "{l}");
        let l = detection_loss_values(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn half_scores_give_ln2() {
        let l = detection_loss_values(&[0.5, 0.5], &[1, 0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = localization_loss_values(&[0.5; 8], &[1, 0, 0, 1, 1, 1, 0, 0], 2, 2, 2).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn wrong_predictions_are_penalized_not_rewarded() {
        let good = detection_loss_values(&[0.9], &[1]).unwrap();
        let bad = detection_loss_values(&[0.1], &[1]).unwrap();
        assert!(bad > good && good > 0.0);
    }

    #[test]
    fn perfect_localization_is_near_zero() {
        let masks = [1u8, 0, 1, 1, 0, 0, 1, 0, 0];
        let maps: Vec<f64> = masks.iter().map(|&m| m as f64).collect();
        let l = localization_loss_values(&maps, &masks, 1, 3, 3).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(detection_loss_values(&[0.2, 0.3], &[1]), Err(Error::Shape(_))));
        let m = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let g = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(localization_loss(&m, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn weighted_sum() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, &w) - 1.0).abs() < 1e-15);
        assert!((total_loss(0.5, 1.0, &w) - 0.8).abs() < 1e-15);
        let det_only = LossWeights {
            lambda_det: 0.4,
            lambda_loc: 0.0,
        };
        assert_eq!(total_loss(0.7, 123.0, &det_only), 0.4 * 0.7);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda_det: 0.0, lambda_loc: 0.0 }.validate().is_err());
        assert!(LossWeights { lambda_det: -1.0, lambda_loc: 0.5 }.validate().is_err());
    }
}
