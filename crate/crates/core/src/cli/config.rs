use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_manifest, split_manifest, PreprocessConfig, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training manifests. Records already tagged `train`/`val` keep their
    /// split; otherwise a stratified split is drawn.
    pub manifests: Vec<PathBuf>,
    /// Explicit validation manifests; when given, every record of
    /// `manifests` is used for training.
    #[serde(default)]
    pub val_manifests: Vec<PathBuf>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

/// A complete training run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Parses a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.manifests.iter_mut().for_each(fix);
        cfg.data.val_manifests.iter_mut().for_each(fix);
        fix(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.preprocess.validate()?;
        self.train.validate()?;
        if self.data.manifests.is_empty() {
            return Err(Error::InvalidConfig("data.manifests is empty".into()));
        }
        for p in self.data.manifests.iter().chain(&self.data.val_manifests) {
            if !p.is_file() {
                return Err(Error::InvalidConfig(format!("manifest {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Training and validation records.
    pub fn split_records(&self) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
        let mut records = Vec::new();
        for m in &self.data.manifests {
            records.extend(read_manifest(m)?);
        }
        if !self.data.val_manifests.is_empty() {
            let mut val = Vec::new();
            for m in &self.data.val_manifests {
                val.extend(read_manifest(m)?);
            }
            return Ok((records, val));
        }
        if records.iter().any(|r| r.split != Split::Test) {
            let (train, val): (Vec<_>, Vec<_>) = records
                .into_iter()
                .filter(|r| r.split != Split::Test)
                .partition(|r| r.split == Split::Train);
            if train.is_empty() || val.is_empty() {
                return Err(Error::InvalidConfig("manifests need both train and val records".into()));
            }
            return Ok((train, val));
        }
        split_manifest(&records, self.data.train_fraction, self.train.seed)
    }
}
