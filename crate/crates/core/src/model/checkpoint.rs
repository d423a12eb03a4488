//! Safetensors checkpoints.
//!
//! Files written by [`save_checkpoint`] store every parameter under its
//! internal name and the model config as JSON in the `config` metadata
//! key. Foreign archives are read through a [`Sidecar`] that maps archive
//! tensor names to internal names, optionally taking a row range and
//! reshaping (packed projections and `[E, 1, K]` conv weights).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CONFIG_KEY: &str = "config";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    /// Tensor name inside the archive.
    pub archive: String,
    /// Internal parameter name, e.g. `layers.3.w_in`.
    pub name: String,
    /// Half-open range along the first axis.
    #[serde(default)]
    pub rows: Option<(usize, usize)>,
    #[serde(default)]
    pub reshape: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default)]
    pub config: Option<ModelConfig>,
    pub tensors: Vec<SidecarEntry>,
}

impl Sidecar {
    pub fn from_json_file(path: &Path) -> Result<Sidecar> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("sidecar {}: {e}", path.display())))
    }
}

fn decode(view: &TensorView<'_>, name: &str) -> Result<Tensor> {
    let bytes = view.data();
    let data: Vec<f64> = match view.dtype() {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        other => {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has unsupported dtype {other:?}"
            )))
        }
    };
    Tensor::new(view.shape().to_vec(), data)
        .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
}

/// Writes named tensors plus string metadata as a safetensors archive.
pub fn save_tensors(
    path: &Path,
    tensors: &[(String, &Tensor)],
    metadata: HashMap<String, String>,
    precision: Precision,
) -> Result<()> {
    let encoded: Vec<(&str, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let bytes = match precision {
                Precision::F64 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
                Precision::F32 => t
                    .data()
                    .iter()
                    .flat_map(|v| (*v as f32).to_le_bytes())
                    .collect(),
            };
            (name.as_str(), t.shape().to_vec(), bytes)
        })
        .collect();
    let dtype = match precision {
        Precision::F64 => Dtype::F64,
        Precision::F32 => Dtype::F32,
    };
    let mut views = Vec::with_capacity(encoded.len());
    for (name, shape, bytes) in &encoded {
        let view = TensorView::new(dtype, shape.clone(), bytes)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        views.push((*name, view));
    }
    let meta = if metadata.is_empty() {
        None
    } else {
        Some(metadata)
    };
    let bytes =
        safetensors::serialize(views, &meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}

/// Reads every tensor and the string metadata of a safetensors archive.
pub fn load_tensors(path: &Path) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let archive = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (name, view) in archive.tensors() {
        out.insert(name.clone(), decode(&view, &name)?);
    }
    let (_, meta) =
        SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((out, meta.metadata().clone().unwrap_or_default()))
}

/// Writes `model` to `path`. `precision` chooses the stored dtype.
pub fn save_checkpoint(model: &Model, path: &Path, precision: Precision) -> Result<()> {
    let params = model.named_parameters();
    let refs: Vec<(String, &Tensor)> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.as_ref()))
        .collect();
    let mut meta = HashMap::new();
    meta.insert(
        CONFIG_KEY.to_string(),
        serde_json::to_string(model.config())?,
    );
    save_tensors(path, &refs, meta, precision)
}

/// Loads a model. The config comes from `config` if given, else the
/// sidecar, else the archive metadata.
pub fn load_checkpoint(
    path: &Path,
    config: Option<ModelConfig>,
    sidecar: Option<&Sidecar>,
) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    let archive = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let config = match config.or_else(|| sidecar.and_then(|s| s.config.clone())) {
        Some(c) => c,
        None => {
            let (_, meta) =
                SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let text = meta
                .metadata()
                .as_ref()
                .and_then(|m| m.get(CONFIG_KEY))
                .ok_or_else(|| {
                    Error::Checkpoint("checkpoint carries no config; supply one".into())
                })?;
            serde_json::from_str(text)?
        }
    };

    let mut tensors = BTreeMap::new();
    match sidecar {
        None => {
            for (name, view) in archive.tensors() {
                tensors.insert(name.clone(), decode(&view, &name)?);
            }
        }
        Some(sc) => {
            for entry in &sc.tensors {
                let view = archive.tensor(&entry.archive).map_err(|_| {
                    Error::Checkpoint(format!("missing tensor `{}` in archive", entry.archive))
                })?;
                let mut t = decode(&view, &entry.archive)?;
                if let Some((start, end)) = entry.rows {
                    if t.rank() == 0 || end < start || end > t.shape()[0] {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{}`: rows {start}..{end} out of range for shape {:?}",
                            entry.archive,
                            t.shape()
                        )));
                    }
                    t = t.slice(0, start, end - start)?;
                }
                if let Some(shape) = &entry.reshape {
                    t = t.reshape(shape).map_err(|e| {
                        Error::Checkpoint(format!("tensor `{}`: {e}", entry.archive))
                    })?;
                }
                tensors.insert(entry.name.clone(), t);
            }
        }
    }
    Model::from_named(config, tensors)
}
