//! Mini-batch Adam training with deterministic shuffling, per-epoch
//! validation and best-validation model selection.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, PreprocessConfig};
use crate::dataset::{load_batch, Batch, MaskPolicy, SampleSource};
use crate::error::{Error, Result};
use crate::losses::{detection_loss, localization_loss, total_loss_tensor, LossWeights};
use crate::metrics::ConfusionCounts;
use crate::models::{save_checkpoint, CheckpointMeta, Model, ModelKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ground-truth targets used for real images when training the hybrid model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealImageTargets {
    /// The water mask shipped with the real image.
    #[default]
    WaterMask,
    /// All-zeros masks (nothing manipulated).
    Zeros,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    /// Epoch with the lowest validation total loss (earliest on ties).
    #[default]
    BestValidation,
    FinalEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    pub real_image_targets: RealImageTargets,
    pub selection: ModelSelection,
    /// Stop after this many optimizer steps (mid-epoch if needed).
    pub max_steps: Option<usize>,
    /// Keep localization gradients out of the backbone.
    pub detach_localization: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-4,
            batch_size: 16,
            seed: 0,
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            real_image_targets: RealImageTargets::default(),
            selection: ModelSelection::default(),
            max_steps: None,
            detach_localization: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::TrainConfig("epochs must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::TrainConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::TrainConfig("batch_size must be at least 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::TrainConfig("max_steps must be at least 1".into()));
        }
        self.loss_weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub steps: usize,
    pub train_det_loss: f64,
    pub train_loc_loss: Option<f64>,
    pub train_total_loss: f64,
    pub val_det_loss: f64,
    pub val_loc_loss: Option<f64>,
    pub val_total_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub det_loss: f64,
    pub loc_loss: Option<f64>,
    pub total_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Model state captured at the end of an epoch.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_loss: f64,
    pub state: BTreeMap<String, Tensor>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The checkpoint chosen by `TrainConfig::selection`, already loaded into the model.
    pub selected: Checkpoint,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: TrainHistory,
}

/// Index of the epoch with minimum validation total loss; earliest wins ties.
pub fn select_best(history: &TrainHistory) -> Option<usize> {
    history
        .epochs
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, e)| match best {
            Some((_, v)) if e.val_total_loss >= v => best,
            _ => Some((i, e.val_total_loss)),
        })
        .map(|(i, _)| i)
}

/// On-disk layout of a training run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub preprocess: PreprocessConfig,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, preprocess: PreprocessConfig) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(Self { root, preprocess })
    }

    pub fn history_path(&self) -> PathBuf {
        self.root.join("history.jsonl")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch}.safetensors"))
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("best.safetensors")
    }

    fn meta(&self, model: &Model, weights: &LossWeights, epoch: usize, val_loss: f64) -> CheckpointMeta {
        CheckpointMeta {
            model: model.spec().clone(),
            model_tag: model.spec().tag(),
            loss_weights: *weights,
            epoch,
            val_loss: Some(val_loss),
            target_size: self.preprocess.target_size,
            normalization: self.preprocess.normalization(),
        }
    }

    fn append_history(&self, rec: &EpochRecord) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.history_path())?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
        Ok(())
    }
}

/// Reads `history.jsonl` from a run directory.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn mask_policy(model: &Model, cfg: &TrainConfig) -> MaskPolicy {
    match model.spec().kind {
        ModelKind::Hybrid => match cfg.real_image_targets {
            RealImageTargets::WaterMask => MaskPolicy::Required,
            RealImageTargets::Zeros => MaskPolicy::ZerosForReal,
        },
        ModelKind::Cat | ModelKind::Mul => MaskPolicy::ZeroFillMissing,
        ModelKind::Plain => MaskPolicy::Ignore,
    }
}

struct LossParts {
    det: Tensor,
    loc: Option<Tensor>,
    total: Tensor,
    scores: Vec<f32>,
    /// False when any score or map value is NaN or infinite; the loss clamp
    /// would otherwise hide it.
    finite_outputs: bool,
}

/// Forward pass and loss. Baselines optimize `lambda_det * L_det`, which is
/// the hybrid objective with the localization term removed.
fn compute_losses(model: &Model, batch: &Batch, weights: &LossWeights, train: bool) -> Result<LossParts> {
    let out = model.forward_t(&batch.images, batch.masks.as_ref(), train)?;
    let scores = out.scores()?;
    let det = detection_loss(&scores, &batch.labels)?;
    let loc = match (&out.maps, &batch.masks) {
        (Some(maps), Some(masks)) => Some(localization_loss(maps, &masks.squeeze(1)?)?),
        (Some(_), None) => return Err(Error::TrainConfig("hybrid training needs masks".into())),
        _ => None,
    };
    let total = total_loss_tensor(&det, loc.as_ref(), weights)?;
    let scores: Vec<f32> = scores.to_vec1()?;
    let maps_finite = match &out.maps {
        Some(m) => m.sum_all()?.to_scalar::<f32>()?.is_finite(),
        None => true,
    };
    Ok(LossParts {
        det,
        loc,
        total,
        finite_outputs: maps_finite && scores.iter().all(|s| s.is_finite()),
        scores,
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

struct ValidationResult {
    det: f64,
    loc: Option<f64>,
    total: f64,
    accuracy: f64,
}

fn validate(model: &Model, val: &dyn SampleSource, cfg: &TrainConfig, policy: MaskPolicy) -> Result<ValidationResult> {
    let n = val.len();
    let (mut det, mut loc, mut loc_seen) = (0.0, 0.0, false);
    let mut finite = true;
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(cfg.batch_size) {
        let (samples, batch) = load_batch(val, chunk, 0, policy)?;
        let parts = compute_losses(model, &batch, &cfg.loss_weights, false)?;
        finite &= parts.finite_outputs;
        let share = chunk.len() as f64 / n as f64;
        det += scalar(&parts.det)? * share;
        if let Some(l) = &parts.loc {
            loc += scalar(l)? * share;
            loc_seen = true;
        }
        scores.extend(parts.scores.iter().map(|&s| s as f64));
        labels.extend(samples.iter().map(|s| s.label));
    }
    let loc = loc_seen.then_some(loc);
    let mut total = crate::losses::total_loss(det, loc.unwrap_or(0.0), &cfg.loss_weights);
    if !finite {
        total = f64::NAN;
    }
    let accuracy = ConfusionCounts::from_scores(&scores, &labels, 0.5)?.accuracy().unwrap_or(0.0);
    Ok(ValidationResult {
        det,
        loc,
        total,
        accuracy,
    })
}

fn finite_gradients(grads: &candle_core::backprop::GradStore, vars: &[Var]) -> Result<bool> {
    let mut sq = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.is_finite())
}

/// Fixed per-epoch visiting order derived from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

fn check_masks(model: &Model, source: &dyn SampleSource, policy: MaskPolicy, what: &str) -> Result<()> {
    let missing = (0..source.len()).find(|&i| match policy {
        MaskPolicy::Required => !source.has_mask(i),
        MaskPolicy::ZerosForReal => source.label(i) == 1 && !source.has_mask(i),
        _ => false,
    });
    if let Some(i) = missing {
        return Err(Error::TrainConfig(format!(
            "{} requires ground-truth masks; {what} sample {i} has none",
            model.spec().tag()
        )));
    }
    Ok(())
}

/// Trains `model` in place and leaves the selected checkpoint loaded.
pub fn train(
    model: &mut Model,
    train_set: &dyn SampleSource,
    val_set: &dyn SampleSource,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::TrainConfig("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::TrainConfig("validation set is empty".into()));
    }
    if let Model::Hybrid(h) = model {
        h.set_detach_localization(cfg.detach_localization);
    }
    if let Some(run) = run {
        model.set_normalization(run.preprocess.normalization());
    }
    let policy = mask_policy(model, cfg);
    check_masks(model, train_set, policy, "training")?;
    check_masks(model, val_set, policy, "validation")?;

    let vars: Vec<Var> = model.trainable();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.adam.beta1,
            beta2: cfg.adam.beta2,
            eps: cfg.adam.eps,
            weight_decay: 0.0,
        },
    )?;

    let mut history = TrainHistory::default();
    let mut best: Option<Checkpoint> = None;
    let mut last: Option<Checkpoint> = None;
    let mut global_step = 0usize;
    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let (mut det_sum, mut loc_sum, mut total_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut has_loc = false;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (_, batch) = load_batch(train_set, chunk, epoch, policy)?;
            let parts = compute_losses(model, &batch, &cfg.loss_weights, true)?;
            let total = scalar(&parts.total)?;
            if !total.is_finite() || !parts.finite_outputs {
                return Err(Error::Divergence {
                    epoch,
                    step: global_step + 1,
                });
            }
            let grads = parts.total.backward()?;
            if !finite_gradients(&grads, &vars)? {
                return Err(Error::Divergence {
                    epoch,
                    step: global_step + 1,
                });
            }
            opt.step(&grads)?;
            global_step += 1;
            steps += 1;

            let det = scalar(&parts.det)?;
            let loc = parts.loc.as_ref().map(scalar).transpose()?;
            let k = chunk.len() as f64;
            det_sum += det * k;
            total_sum += total * k;
            if let Some(l) = loc {
                loc_sum += l * k;
                has_loc = true;
            }
            seen += chunk.len();
            history.steps.push(StepRecord {
                epoch,
                step: global_step,
                det_loss: det,
                loc_loss: loc,
                total_loss: total,
            });
            log::debug!("epoch {epoch} step {global_step}: total {total:.6}");
            if cfg.max_steps.is_some_and(|m| global_step >= m) {
                finish_epoch(
                    model, val_set, cfg, policy, run, &mut history, &mut best, &mut last, epoch, steps,
                    (det_sum, loc_sum, total_sum, seen, has_loc), started,
                )?;
                break 'epochs;
            }
        }
        finish_epoch(
            model, val_set, cfg, policy, run, &mut history, &mut best, &mut last, epoch, steps,
            (det_sum, loc_sum, total_sum, seen, has_loc), started,
        )?;
    }

    let best = best.expect("at least one epoch ran");
    let last = last.expect("at least one epoch ran");
    let selected = match cfg.selection {
        ModelSelection::BestValidation => best.clone(),
        ModelSelection::FinalEpoch => last.clone(),
    };
    model.store().restore(&selected.state).map_err(Error::Checkpoint)?;
    if let Some(run) = run {
        let src = run.epoch_checkpoint(selected.epoch);
        fs::copy(&src, run.best_checkpoint())?;
        fs::copy(src.with_extension("json"), run.best_checkpoint().with_extension("json"))?;
    }
    Ok(TrainOutcome {
        selected,
        best,
        last,
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    model: &Model,
    val_set: &dyn SampleSource,
    cfg: &TrainConfig,
    policy: MaskPolicy,
    run: Option<&RunDir>,
    history: &mut TrainHistory,
    best: &mut Option<Checkpoint>,
    last: &mut Option<Checkpoint>,
    epoch: usize,
    steps: usize,
    sums: (f64, f64, f64, usize, bool),
    started: Instant,
) -> Result<()> {
    let (det_sum, loc_sum, total_sum, seen, has_loc) = sums;
    let val = validate(model, val_set, cfg, policy)?;
    if !val.total.is_finite() {
        return Err(Error::Divergence { epoch, step: 0 });
    }
    let n = seen.max(1) as f64;
    let rec = EpochRecord {
        epoch,
        steps,
        train_det_loss: det_sum / n,
        train_loc_loss: has_loc.then_some(loc_sum / n),
        train_total_loss: total_sum / n,
        val_det_loss: val.det,
        val_loc_loss: val.loc,
        val_total_loss: val.total,
        val_accuracy: val.accuracy,
        seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "epoch {epoch}: train total {:.5} det {:.5} | val total {:.5} acc {:.3}",
        rec.train_total_loss,
        rec.train_det_loss,
        rec.val_total_loss,
        rec.val_accuracy
    );
    let ckpt = Checkpoint {
        epoch,
        val_loss: val.total,
        state: model.store().snapshot()?,
    };
    if let Some(run) = run {
        run.append_history(&rec)?;
        save_checkpoint(
            model,
            &run.meta(model, &cfg.loss_weights, epoch, val.total),
            &run.epoch_checkpoint(epoch),
        )?;
    }
    history.epochs.push(rec);
    if select_best(history) == Some(history.epochs.len() - 1) {
        *best = Some(ckpt.clone());
    }
    *last = Some(ckpt);
    Ok(())
}

/// Preprocessing statistics a trained model expects, for callers that do not
/// go through a run directory.
pub fn default_normalization() -> Normalization {
    PreprocessConfig::default().normalization()
}
