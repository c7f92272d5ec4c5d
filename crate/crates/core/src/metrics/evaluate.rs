use std::collections::BTreeMap;

use crate::data::{FloodMask, PreprocessConfig, SampleRecord};
use crate::dataset::{load_batch, MaskPolicy, RecordSource, SampleSource};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::robustness::{AttackSpec, JPEG_ENCODER_INFO};

use super::{auc, ConfusionCounts, EvalReport, PixelConfusion, DEFAULT_THRESHOLD};

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub preprocess: PreprocessConfig,
    /// Detection threshold on the sigmoid score.
    pub threshold: f64,
    /// Binarization threshold for localization maps.
    pub map_threshold: f32,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            map_threshold: 0.5,
            batch_size: 16,
        }
    }
}

/// Scores and per-image localization metrics of one dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Per-image bPA for images that carry a ground-truth mask (hybrid models only).
    pub bpa: Vec<f64>,
    /// Per-image IoU, aligned with `bpa`.
    pub iou: Vec<f64>,
}

impl ScoredSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn by_label(&self, label: u8) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == label)
            .map(|(&s, _)| s)
            .collect()
    }

    pub fn positives(&self) -> Vec<f64> {
        self.by_label(1)
    }

    pub fn negatives(&self) -> Vec<f64> {
        self.by_label(0)
    }
}

/// Runs the model over every sample in eval mode.
pub fn score_dataset(model: &Model, source: &dyn SampleSource, opts: &EvalOptions) -> Result<ScoredSet> {
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let policy = if model.needs_masks() {
        MaskPolicy::ZeroFillMissing
    } else {
        MaskPolicy::Ignore
    };
    let mut out = ScoredSet::default();
    let indices: Vec<usize> = (0..source.len()).collect();
    for chunk in indices.chunks(opts.batch_size) {
        let (samples, batch) = load_batch(source, chunk, 0, policy)?;
        let fwd = model.forward_t(&batch.images, batch.masks.as_ref(), false)?;
        let scores: Vec<f32> = fwd.scores()?.to_vec1()?;
        out.scores.extend(scores.iter().map(|&s| s as f64));
        out.labels.extend(samples.iter().map(|s| s.label));
        if let Some(maps) = &fwd.maps {
            let (_, h, w) = maps.dims3()?;
            let maps: Vec<Vec<Vec<f32>>> = maps.to_vec3()?;
            for (sample, map) in samples.iter().zip(maps) {
                let Some(gt) = &sample.mask else { continue };
                let flat: Vec<f32> = map.into_iter().flatten().collect();
                let pred = FloodMask::from_probabilities(h, w, &flat, opts.map_threshold)?;
                let pc = PixelConfusion::from_masks(&pred, gt)?;
                out.bpa.push(pc.balanced_accuracy());
                out.iou.push(pc.iou());
            }
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds a report from scores alone. AUC uses the set's own negatives when
/// it has any, otherwise those of `paired_real`.
pub fn report_from_scores(
    model: &str,
    dataset: &str,
    attack: Option<&AttackSpec>,
    scored: &ScoredSet,
    paired_real: Option<&ScoredSet>,
    threshold: f64,
) -> Result<EvalReport> {
    let counts = ConfusionCounts::from_scores(&scored.scores, &scored.labels, threshold)?;
    let pos = scored.positives();
    let mut neg = scored.negatives();
    let mut paired = false;
    if neg.is_empty() {
        if let Some(real) = paired_real {
            neg = real.negatives();
            paired = true;
        }
    }
    let auc = if pos.is_empty() || neg.is_empty() {
        None
    } else {
        Some(auc(&pos, &neg)?)
    };
    let attack = attack.filter(|a| !a.is_none());
    let mut metadata = BTreeMap::new();
    metadata.insert("detection_threshold".into(), threshold.to_string());
    if !scored.bpa.is_empty() {
        metadata.insert("mask_resolution".into(), "model output grid".into());
        metadata.insert("localization_images".into(), scored.bpa.len().to_string());
    }
    if auc.is_some() && paired {
        metadata.insert("auc_negatives".into(), format!("paired real set ({} images)", neg.len()));
    }
    if let Some(a) = attack {
        if a.name == crate::robustness::AttackName::Jpeg {
            metadata.insert("jpeg_encoder".into(), JPEG_ENCODER_INFO.into());
        }
    }
    Ok(EvalReport {
        model: model.to_string(),
        dataset: dataset.to_string(),
        attack: attack.map_or_else(|| "none".to_string(), AttackSpec::tag),
        attack_spec: attack.cloned(),
        n_images: scored.len(),
        tnr: counts.tnr(),
        tpr: counts.tpr(),
        auc,
        bpa: mean(&scored.bpa),
        iou: mean(&scored.iou),
        metadata,
    })
}

/// Dataset tag shared by all records.
pub fn dataset_tag(records: &[SampleRecord]) -> Result<String> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot evaluate an empty record set".into()))?;
    if let Some(other) = records.iter().find(|r| r.source != first.source) {
        return Err(Error::InvalidConfig(format!(
            "records mix datasets {} and {}",
            first.source, other.source
        )));
    }
    Ok(first.source.to_string())
}

/// Scores `records` (after `attack`, if any) and fills the defined metrics.
pub fn evaluate(
    model: &Model,
    records: &[SampleRecord],
    attack: Option<&AttackSpec>,
    paired_real: Option<&ScoredSet>,
    opts: &EvalOptions,
) -> Result<(EvalReport, ScoredSet)> {
    let dataset = dataset_tag(records)?;
    let attack = attack.map(AttackSpec::resolved).transpose()?;
    let source = RecordSource::new(records.to_vec(), opts.preprocess.clone()).with_attack(attack.clone());
    let scored = score_dataset(model, &source, opts)?;
    let mut report = report_from_scores(
        &model.spec().tag(),
        &dataset,
        attack.as_ref(),
        &scored,
        paired_real,
        opts.threshold,
    )?;
    if !scored.bpa.is_empty() {
        let s = opts.preprocess.target_size;
        report.metadata.insert("mask_resolution".into(), format!("{s}x{s}"));
    }
    Ok((report, scored))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet {
            scores: scores.to_vec(),
            labels: labels.to_vec(),
            ..Default::default()
        }
    }

    #[test]
    fn toy_mixed_set() {
        // fakes 0.9, 0.4; reals 0.3, 0.6 -> tp 1, fn 1, tn 1, fp 1; pairs 0.9>0.3, 0.9>0.6, 0.4>0.3
        let s = set(&[0.9, 0.4, 0.3, 0.6], &[1, 1, 0, 0]);
        let r = report_from_scores("m", "d", None, &s, None, 0.5).unwrap();
        assert_eq!(r.tpr, Some(0.5));
        assert_eq!(r.tnr, Some(0.5));
        assert_eq!(r.auc, Some(0.75));
        assert_eq!(r.n_images, 4);
        assert_eq!(r.attack, "none");
        assert!(r.bpa.is_none());
    }

    #[test]
    fn all_real_set_has_no_tpr() {
        let mut s = set(&[0.1, 0.7], &[0, 0]);
        s.bpa = vec![1.0, 0.5];
        s.iou = vec![1.0, 0.0];
        let r = report_from_scores("m", "WSOC", None, &s, None, 0.5).unwrap();
        assert_eq!(r.tnr, Some(0.5));
        assert!(r.tpr.is_none() && r.auc.is_none());
        assert_eq!(r.bpa, Some(0.75));
        assert_eq!(r.iou, Some(0.5));
    }

    #[test]
    fn fake_set_pairs_with_real() {
        let fake = set(&[0.9, 0.8], &[1, 1]);
        let real = set(&[0.1, 0.85], &[0, 0]);
        let r = report_from_scores("m", "d", None, &fake, Some(&real), 0.5).unwrap();
        assert_eq!(r.tpr, Some(1.0));
        assert_eq!(r.auc, Some(0.75));
        let r = report_from_scores("m", "d", None, &fake, None, 0.5).unwrap();
        assert!(r.auc.is_none());
    }

    #[test]
    fn none_attack_matches_omitted() {
        let s = set(&[0.9, 0.1], &[1, 0]);
        let a = report_from_scores("m", "d", Some(&AttackSpec::none()), &s, None, 0.5).unwrap();
        let b = report_from_scores("m", "d", None, &s, None, 0.5).unwrap();
        assert_eq!(a, b);
    }
}
