//! Detection metrics (TPR, TNR, AUC) and per-image localization metrics
//! (balanced pixel accuracy, IoU) averaged over images.

mod evaluate;
mod report;

pub use evaluate::{dataset_tag, evaluate, report_from_scores, score_dataset, EvalOptions, ScoredSet};
pub use report::{render_csv, render_markdown, render_svg_charts, EvalReport, Metric, ReportTable, TableRow};

use crate::data::FloodMask;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// 1 iff `score >= threshold`.
pub fn threshold_decision(score: f64, threshold: f64) -> u8 {
    u8::from(score >= threshold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
        }
        let mut c = Self::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (l, threshold_decision(s, threshold)) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fn_ += 1,
                (_, 1) => c.fp += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Fraction of fakes flagged as fake; `None` without positives.
    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    /// Fraction of real images passed as real; `None` without negatives.
    pub fn tnr(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| (self.tp + self.tn) as f64 / t as f64)
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
///
/// Computed exactly in integer arithmetic on doubled pair credits.
pub fn auc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(Error::MetricUndefined("AUC needs positive and negative scores".into()));
    }
    if pos_scores.iter().chain(neg_scores).any(|s| s.is_nan()) {
        return Err(Error::MetricUndefined("AUC scores contain NaN".into()));
    }
    let mut neg = neg_scores.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut doubled: u128 = 0;
    for &p in pos_scores {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        doubled += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = pos_scores.len() as u128 * neg_scores.len() as u128;
    Ok(doubled as f64 / (2 * pairs) as f64)
}

/// `p[i][j]` = number of pixels of ground-truth class `i` predicted as `j`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelConfusion {
    pub p: [[usize; 2]; 2],
}

impl PixelConfusion {
    pub fn from_masks(pred: &FloodMask, gt: &FloodMask) -> Result<Self> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let mut p = [[0usize; 2]; 2];
        for (&g, &q) in gt.data().iter().zip(pred.data()) {
            p[g as usize][q as usize] += 1;
        }
        Ok(Self { p })
    }

    /// Mean per-class accuracy over the classes present in the ground truth.
    pub fn balanced_accuracy(&self) -> f64 {
        let mut sum = 0.0;
        let mut present = 0;
        for i in 0..2 {
            let n = self.p[i][0] + self.p[i][1];
            if n > 0 {
                sum += self.p[i][i] as f64 / n as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }

    /// `|pred ∩ gt| / |pred ∪ gt|` on the positive class; 1 when both are empty.
    pub fn iou(&self) -> f64 {
        let inter = self.p[1][1];
        let union = self.p[1][1] + self.p[1][0] + self.p[0][1];
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

pub fn balanced_pixel_accuracy(pred: &FloodMask, gt: &FloodMask) -> Result<f64> {
    Ok(PixelConfusion::from_masks(pred, gt)?.balanced_accuracy())
}

pub fn iou(pred: &FloodMask, gt: &FloodMask) -> Result<f64> {
    Ok(PixelConfusion::from_masks(pred, gt)?.iou())
}

fn mean_over_images(pairs: &[(FloodMask, FloodMask)], f: impl Fn(&PixelConfusion) -> f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::MetricUndefined("no images to average over".into()));
    }
    let mut total = 0.0;
    for (pred, gt) in pairs {
        total += f(&PixelConfusion::from_masks(pred, gt)?);
    }
    Ok(total / pairs.len() as f64)
}

/// Dataset bPA: the mean of per-image values over `(prediction, ground truth)` pairs.
pub fn mean_balanced_pixel_accuracy(pairs: &[(FloodMask, FloodMask)]) -> Result<f64> {
    mean_over_images(pairs, PixelConfusion::balanced_accuracy)
}

/// Dataset IoU: the mean of per-image values.
pub fn mean_iou(pairs: &[(FloodMask, FloodMask)]) -> Result<f64> {
    mean_over_images(pairs, PixelConfusion::iou)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_boundary() {
        assert_eq!(threshold_decision(0.5, 0.5), 1);
        assert_eq!(threshold_decision(0.49, 0.5), 0);
        assert_eq!(threshold_decision(1.0, 0.5), 1);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[0.9; 5], &[0.1; 7]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[0.3; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1], &[0.9]).unwrap(), 0.0);
        assert!(matches!(auc(&[], &[0.2]), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let pos = [0.2, 0.8, 0.55, 0.55, 0.9];
        let neg = [0.1, 0.55, 0.3, 0.85];
        let f = |v: &[f64]| v.iter().map(|x| (3.0 * x).exp() - 7.0).collect::<Vec<_>>();
        assert_eq!(auc(&pos, &neg).unwrap(), auc(&f(&pos), &f(&neg)).unwrap());
    }

    #[test]
    fn confusion_rates() {
        let c = ConfusionCounts::from_scores(&[0.9, 0.2, 0.6, 0.4], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((c.tp, c.fn_, c.fp, c.tn), (1, 1, 1, 1));
        assert_eq!(c.tpr(), Some(0.5));
        let only_real = ConfusionCounts::from_scores(&[0.1], &[0], 0.5).unwrap();
        assert_eq!(only_real.tpr(), None);
        assert_eq!(only_real.tnr(), Some(1.0));
    }

    #[test]
    fn bpa_cases() {
        let gt = FloodMask::from_fn(4, 4, |y, _| y < 2);
        assert_eq!(balanced_pixel_accuracy(&gt, &gt).unwrap(), 1.0);
        let ones = FloodMask::from_fn(4, 4, |_, _| true);
        assert_eq!(balanced_pixel_accuracy(&ones, &gt).unwrap(), 0.5);
        // single-class ground truth averages over the present class only
        let zeros = FloodMask::zeros(4, 4);
        assert_eq!(balanced_pixel_accuracy(&zeros, &zeros).unwrap(), 1.0);
        assert_eq!(balanced_pixel_accuracy(&ones, &zeros).unwrap(), 0.0);
        assert!(balanced_pixel_accuracy(&FloodMask::zeros(3, 4), &gt).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = FloodMask::from_fn(4, 4, |y, _| y == 0);
        let b = FloodMask::from_fn(4, 4, |y, _| y == 3);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let quarter = FloodMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let ones = FloodMask::from_fn(4, 4, |_, _| true);
        assert_eq!(iou(&ones, &quarter).unwrap(), 0.25);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&FloodMask::zeros(2, 2), &FloodMask::zeros(2, 2)).unwrap(), 1.0);
    }

    #[test]
    fn bpa_symmetric_under_class_swap_but_iou_is_not() {
        let pred = FloodMask::from_fn(4, 4, |y, x| (y + x) % 3 == 0);
        let gt = FloodMask::from_fn(4, 4, |y, _| y < 3);
        let bpa = balanced_pixel_accuracy(&pred, &gt).unwrap();
        let bpa_swapped = balanced_pixel_accuracy(&pred.inverted(), &gt.inverted()).unwrap();
        assert!((bpa - bpa_swapped).abs() < 1e-15);
        assert_ne!(iou(&pred, &gt).unwrap(), iou(&pred.inverted(), &gt.inverted()).unwrap());
    }

    #[test]
    fn dataset_average_is_per_image_not_pooled() {
        // image 1: tiny positive region hit exactly; image 2: large region half hit
        let gt1 = FloodMask::from_fn(4, 4, |y, x| y == 0 && x == 0);
        let gt2 = FloodMask::from_fn(4, 4, |y, _| y < 4);
        let pred2 = FloodMask::from_fn(4, 4, |y, _| y < 2);
        let pairs = vec![(gt1.clone(), gt1.clone()), (pred2.clone(), gt2.clone())];
        let per_image = mean_iou(&pairs).unwrap();
        assert!((per_image - 0.75).abs() < 1e-15);
        let pooled = (1 + 8) as f64 / (1 + 16) as f64;
        assert!((per_image - pooled).abs() > 0.1);
    }
}
