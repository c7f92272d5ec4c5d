//! Command-line front end: `floodforensics {prepare|train|eval|report|explain}`.

mod config;

pub use config::{DataConfig, RunConfig};

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{build_manifest, read_manifest, write_manifest, PreprocessConfig, SampleRecord, Source};
use crate::dataset::{RecordSource, SampleSource};
use crate::error::{Error, Result};
use crate::explain::{cam_map, render_panel};
use crate::metrics::{
    dataset_tag, evaluate, render_csv, render_markdown, render_svg_charts, EvalOptions, EvalReport, ReportTable,
    ScoredSet,
};
use crate::models::{load_checkpoint, images_to_tensor, CheckpointMeta, Model};
use crate::robustness::AttackSpec;
use crate::trainer::{read_history, train, RunDir};

#[derive(Debug, Parser)]
#[command(name = "floodforensics", version, about = "Detect and localize GAN-manipulated flood images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan an image directory (and optional mask directory) into a JSONL manifest.
    Prepare {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        /// 1 for GAN-generated, 0 for real.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        label: u8,
        #[arg(long)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave a completed run untouched.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one or more manifests.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Real manifest whose scores pair with all-fake sets for AUC.
        /// Defaults to the only all-real manifest given, if exactly one.
        #[arg(long)]
        real: Option<PathBuf>,
        /// Attack as inline JSON or a path to a JSON file.
        #[arg(long)]
        attack: Option<String>,
        /// Overrides the attack seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Output directory for report JSON files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate evaluation reports.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Markdown)]
        format: ReportFormat,
        /// Also write one grouped bar chart (SVG) per attack next to `--out`.
        #[arg(long)]
        plots: bool,
        /// Table file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render CAM panels for the first `n` records of a manifest.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// Runs a parsed command; errors map to exit codes via [`Error::exit_code`].
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            images,
            masks,
            label,
            source,
            out,
        } => cmd_prepare(&images, masks.as_deref(), label, source, &out),
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => cmd_train(&config, seed, out, resume),
        Command::Eval {
            checkpoint,
            manifests,
            real,
            attack,
            seed,
            batch_size,
            out,
        } => {
            let attack = attack.map(|a| parse_attack(&a, seed)).transpose()?;
            cmd_eval(&checkpoint, &manifests, real.as_deref(), attack.as_ref(), batch_size, &out).map(|_| ())
        }
        Command::Report {
            reports,
            format,
            plots,
            out,
        } => cmd_report(&reports, format, plots, out.as_deref()),
        Command::Explain {
            checkpoint,
            manifest,
            n,
            out,
        } => cmd_explain(&checkpoint, &manifest, n, &out).map(|_| ()),
    }
}

pub fn cmd_prepare(images: &Path, masks: Option<&Path>, label: u8, source: Source, out: &Path) -> Result<()> {
    let built = build_manifest(images, label, masks, source)?;
    for (path, reason) in &built.skipped.skipped {
        log::warn!("skipped {}: {reason}", path.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_manifest(&built.records, out)?;
    println!("{} records written to {}", built.records.len(), out.display());
    Ok(())
}

const COMPLETE_MARKER: &str = "complete.json";

fn run_is_complete(dir: &Path, cfg: &RunConfig) -> bool {
    let stored = fs::read_to_string(dir.join("config.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<RunConfig>(&s).ok());
    stored.as_ref() == Some(cfg) && dir.join(COMPLETE_MARKER).is_file() && dir.join("best.safetensors").is_file()
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    if resume && run_is_complete(&cfg.out_dir, &cfg) {
        println!("run in {} is already complete", cfg.out_dir.display());
        return Ok(());
    }
    let run = RunDir::new(&cfg.out_dir, cfg.preprocess.clone())?;
    for stale in [run.history_path(), cfg.out_dir.join(COMPLETE_MARKER)] {
        if stale.exists() {
            fs::remove_file(stale)?;
        }
    }
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;

    let (train_recs, val_recs) = cfg.split_records()?;
    println!(
        "training {} on {} records, validating on {}",
        cfg.model.tag(),
        train_recs.len(),
        val_recs.len()
    );
    let train_src = RecordSource::new(train_recs, cfg.preprocess.clone()).with_augmentation(cfg.train.seed);
    let val_src = RecordSource::new(val_recs, cfg.preprocess.clone());
    let mut model = Model::build(&cfg.model, cfg.train.seed)?;
    let outcome = train(&mut model, &train_src, &val_src, &cfg.train, Some(&run))?;
    for e in &outcome.history.epochs {
        println!(
            "epoch {:>3}  train {:.5}  val {:.5}  val_acc {:.3}",
            e.epoch, e.train_total_loss, e.val_total_loss, e.val_accuracy
        );
    }
    fs::write(
        cfg.out_dir.join(COMPLETE_MARKER),
        serde_json::to_string_pretty(&serde_json::json!({
            "selected_epoch": outcome.selected.epoch,
            "best_epoch": outcome.best.epoch,
            "last_epoch": outcome.last.epoch,
            "epochs_logged": read_history(&run.history_path())?.len(),
        }))?,
    )?;
    println!("selected epoch {} -> {}", outcome.selected.epoch, run.best_checkpoint().display());
    Ok(())
}

/// Reads an attack from inline JSON or a JSON file.
pub fn parse_attack(arg: &str, seed: Option<u64>) -> Result<AttackSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| Error::InvalidConfig(format!("cannot read attack file {arg}: {e}")))?
    };
    let mut spec: AttackSpec =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("attack spec: {e}")))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.resolved()
}

fn eval_options(meta: &CheckpointMeta, batch_size: usize) -> EvalOptions {
    EvalOptions {
        preprocess: PreprocessConfig {
            target_size: meta.target_size,
            channel_mean: meta.normalization.mean,
            channel_std: meta.normalization.std,
            augment_enabled: false,
            ..PreprocessConfig::default()
        },
        batch_size,
        ..EvalOptions::default()
    }
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Writes one report per manifest into `out`; returns the report paths.
pub fn cmd_eval(
    checkpoint: &Path,
    manifests: &[PathBuf],
    real: Option<&Path>,
    attack: Option<&AttackSpec>,
    batch_size: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let opts = eval_options(&meta, batch_size);
    let sets: Vec<Vec<SampleRecord>> = manifests.iter().map(|m| read_manifest(m)).collect::<Result<_>>()?;
    let all_real = |r: &[SampleRecord]| r.iter().all(|x| x.label == 0);
    let real_idx = match real {
        Some(p) => match manifests.iter().position(|m| m == p) {
            Some(i) => Some(i),
            None => return Err(Error::InvalidConfig(format!("--real {} is not among --manifest", p.display()))),
        },
        None => {
            let reals: Vec<usize> = (0..sets.len()).filter(|&i| all_real(&sets[i])).collect();
            if reals.len() > 1 {
                log::warn!("several all-real manifests; pass --real to pair fake sets for AUC");
            }
            (reals.len() == 1).then(|| reals[0])
        }
    };
    fs::create_dir_all(out)?;
    let mut real_scores: Option<ScoredSet> = None;
    let mut order: Vec<usize> = (0..sets.len()).collect();
    if let Some(r) = real_idx {
        order.retain(|&i| i != r);
        order.insert(0, r);
    }
    let mut written = vec![PathBuf::new(); sets.len()];
    for i in order {
        let records = &sets[i];
        let paired = if Some(i) == real_idx { None } else { real_scores.as_ref() };
        let (report, scored) = evaluate(&model, records, attack, paired, &opts)?;
        let path = out.join(format!(
            "{}_{}_{}.json",
            file_safe(&report.model),
            file_safe(&report.dataset),
            file_safe(&report.attack)
        ));
        fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        println!("{}", summary_line(&report));
        if Some(i) == real_idx {
            real_scores = Some(scored);
        }
        written[i] = path;
    }
    Ok(written)
}

fn summary_line(r: &EvalReport) -> String {
    let fields: Vec<String> = [("TNR", r.tnr), ("TPR", r.tpr), ("AUC", r.auc), ("bPA", r.bpa), ("IoU", r.iou)]
        .iter()
        .filter_map(|(k, v)| v.map(|v| format!("{k} {:.1}", v * 100.0)))
        .collect();
    format!("{} / {} / {}: {} (n={})", r.model, r.dataset, r.attack, fields.join(", "), r.n_images)
}

pub fn cmd_report(paths: &[PathBuf], format: ReportFormat, plots: bool, out: Option<&Path>) -> Result<()> {
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p)?;
        let r: EvalReport =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    let table = ReportTable::build(&reports)?;
    let text = match format {
        ReportFormat::Markdown => render_markdown(&table),
        ReportFormat::Csv => render_csv(&table)?,
    };
    match out {
        Some(path) => {
            fs::write(path, &text)?;
            if plots {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let dir = path.parent().unwrap_or(Path::new("."));
                for (attack, svg) in render_svg_charts(&table) {
                    fs::write(dir.join(format!("{stem}_{}.svg", file_safe(&attack))), svg)?;
                }
            }
        }
        None => {
            print!("{text}");
            if plots {
                log::warn!("--plots needs --out; no charts written");
            }
        }
    }
    Ok(())
}

/// Renders panels for the first `n` records; returns the written files.
pub fn cmd_explain(checkpoint: &Path, manifest: &Path, n: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let records = read_manifest(manifest)?;
    if n > records.len() {
        log::warn!("asked for {n} panels but the manifest has {} records", records.len());
    }
    if !model.is_hybrid() {
        log::warn!("{} has no localization head; panels omit the predicted mask", meta.model_tag);
    }
    let take = n.min(records.len());
    if take == 0 {
        return Ok(Vec::new());
    }
    dataset_tag(&records)?;
    let opts = eval_options(&meta, 1);
    let norm = opts.preprocess.normalization();
    let source = RecordSource::new(records[..take].to_vec(), opts.preprocess.clone());
    let mut written = Vec::with_capacity(take);
    for (i, rec) in records[..take].iter().enumerate() {
        let sample = source.sample(i, 0)?;
        let (h, w) = (sample.image.height(), sample.image.width());
        let gt = match &sample.mask {
            Some(m) => m.clone(),
            None => {
                log::warn!("{} has no ground-truth mask; drawing an empty one", rec.image_path.display());
                crate::data::FloodMask::zeros(h, w)
            }
        };
        let mask_input = model.needs_masks().then_some(&gt);
        let heat = cam_map(&model, &sample.image, mask_input)?;
        let pred = match &model {
            Model::Hybrid(m) => {
                let x = images_to_tensor(std::slice::from_ref(&sample.image))?;
                let outs = crate::models::forward_hybrid(m, &x)?;
                Some(outs[0].binarized(0.5)?)
            }
            Model::Baseline(_) => None,
        };
        let unit = norm.denormalize(&sample.image)?;
        written.push(render_panel(&unit, &gt, pred.as_ref(), &heat, out, &rec.stem(), &meta.model_tag)?);
    }
    Ok(written)
}
