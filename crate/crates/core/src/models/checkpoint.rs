//! Checkpoints are safetensors archives of every named parameter and buffer.
//! The archive header carries a JSON metadata record under the `floodforensics`
//! key; the same record is written next to the archive as `<stem>.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

const META_KEY: &str = "floodforensics";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub model_tag: String,
    pub loss_weights: LossWeights,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub target_size: usize,
    pub normalization: Normalization,
}

pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut bytes: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    for (name, var) in model.store().named_tensors() {
        let values: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
        let raw = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        bytes.insert(name.clone(), (var.dims().to_vec(), raw));
    }
    let views = bytes
        .iter()
        .map(|(name, (shape, raw))| {
            TensorView::new(Dtype::F32, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta_json = serde_json::to_string(meta)?;
    let header = HashMap::from([(META_KEY.to_string(), meta_json)]);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    safetensors::serialize_to_file(views, Some(header), path).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, metadata) = SafeTensors::read_metadata(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let json = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} carries no metadata header", path.display())))?;
    serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Rebuilds the architecture recorded in the header and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    let buf = fs::read(path)?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut values = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor `{name}` is not f32")));
        }
        let t = Tensor::from_raw_buffer(view.data(), DType::F32, view.shape(), &Device::Cpu)?;
        values.insert(name, t);
    }
    let mut model = Model::build(&meta.model, 0)?;
    model.set_normalization(meta.normalization);
    model.store().restore(&values).map_err(Error::Checkpoint)?;
    Ok((model, meta))
}
