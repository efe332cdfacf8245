//! Checkpoint archive: a safetensors file holding every parameter under its
//! dotted name, with the model configuration as JSON in the `config`
//! metadata entry.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{OncoError, Result};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{ModelConfig, OncoNet};

const CONFIG_KEY: &str = "config";

fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    match T::DTYPE {
        Dtype::F64 => t.data().iter().flat_map(|v| v.to_f64_lossy().to_le_bytes()).collect(),
        _ => t.data().iter().flat_map(|v| v.to_f32_lossy().to_le_bytes()).collect(),
    }
}

fn from_view<T: Scalar>(name: &str, view: &TensorView<'_>) -> Result<Tensor<T>> {
    let bytes = view.data();
    let data: Vec<T> = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f32_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
        other => {
            return Err(OncoError::Checkpoint(format!(
                "tensor {name} has unsupported dtype {other:?}"
            )))
        }
    };
    Tensor::from_vec(view.shape(), data)
}

/// Serializes a model to bytes.
pub fn to_archive<T: Scalar>(model: &OncoNet<T>) -> Result<Vec<u8>> {
    to_archive_with(model, &BTreeMap::new())
}

/// Serializes a model with extra string metadata. The `config` key is
/// reserved.
pub fn to_archive_with<T: Scalar>(model: &OncoNet<T>, extra: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    if extra.contains_key(CONFIG_KEY) {
        return Err(OncoError::Checkpoint("metadata key \"config\" is reserved".into()));
    }
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params()
        .iter()
        .map(|(k, t)| (k.clone(), t.shape().to_vec(), to_bytes(t)))
        .collect();
    let views = raw
        .iter()
        .map(|(k, shape, bytes)| {
            TensorView::new(T::DTYPE, shape.clone(), bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| OncoError::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta: HashMap<String, String> = extra.clone().into_iter().collect();
    meta.insert(CONFIG_KEY.to_string(), serde_json::to_string(model.config())?);
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| OncoError::Checkpoint(e.to_string()))?;
    canonical_header(bytes)
}

// The header JSON is written in hash-map order; rewrite it with sorted keys
// so identical models give identical files. Offsets are untouched and the
// reordered JSON has the same length.
fn canonical_header(mut bytes: Vec<u8>) -> Result<Vec<u8>> {
    let bad = |m: &str| OncoError::Checkpoint(format!("malformed header: {m}"));
    let n = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| bad("short file"))?.try_into().expect("8 bytes")) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(|| bad("length past end"))?;
    let parsed: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(header.trim_ascii_end()).map_err(|e| bad(&e.to_string()))?;
    let mut sorted = serde_json::to_vec(&parsed)?;
    if sorted.len() > n {
        return Err(bad("canonical form is longer"));
    }
    sorted.resize(n, b' ');
    bytes[8..8 + n].copy_from_slice(&sorted);
    Ok(bytes)
}

/// Restores a model, validating the configuration and every tensor shape.
pub fn from_archive<T: Scalar>(bytes: &[u8]) -> Result<OncoNet<T>> {
    let (_, meta) =
        SafeTensors::read_metadata(bytes).map_err(|e| OncoError::Checkpoint(e.to_string()))?;
    let config_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(CONFIG_KEY))
        .ok_or_else(|| OncoError::Checkpoint("archive has no config block".into()))?;
    let config: ModelConfig = serde_json::from_str(config_json)?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| OncoError::Checkpoint(e.to_string()))?;
    let mut params = ParamStore::new();
    for (name, view) in st.tensors() {
        params.insert(&name, from_view(&name, &view)?);
    }
    OncoNet::from_params(config, params)
}

/// Every metadata entry of an archive, `config` included.
pub fn archive_metadata(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let (_, meta) =
        SafeTensors::read_metadata(bytes).map_err(|e| OncoError::Checkpoint(e.to_string()))?;
    Ok(meta.metadata().clone().unwrap_or_default().into_iter().collect())
}

pub fn save<T: Scalar>(model: &OncoNet<T>, path: &Path) -> Result<()> {
    save_with(model, path, &BTreeMap::new())
}

pub fn save_with<T: Scalar>(model: &OncoNet<T>, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_archive_with(model, extra)?;
    std::fs::write(path, bytes).map_err(|e| OncoError::io(path, e))
}

/// Model and metadata from one read of the file.
pub fn load_with_metadata<T: Scalar>(path: &Path) -> Result<(OncoNet<T>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| OncoError::io(path, e))?;
    Ok((from_archive(&bytes)?, archive_metadata(&bytes)?))
}

pub fn load<T: Scalar>(path: &Path) -> Result<OncoNet<T>> {
    let bytes = std::fs::read(path).map_err(|e| OncoError::io(path, e))?;
    from_archive(&bytes)
}
