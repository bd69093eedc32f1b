use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_BLOB: &str = "tensors.bin";
const FORMAT: &str = "labrador-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    #[serde(default)]
    step: u64,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
}

/// Writes `manifest.json` and a little-endian f64 `tensors.bin` into `dir`.
pub fn save_checkpoint(params: &ModelParams, step: u64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.num_params() * 8);
    let mut tensors = Vec::with_capacity(params.store.len());
    for (name, t) in params.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        dtype: "f64".into(),
        config: params.config.clone(),
        step,
        tensors,
        blob_bytes: blob.len() as u64,
    };
    std::fs::write(dir.join(CHECKPOINT_BLOB), &blob)?;
    std::fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], returning the
/// parameters and the training step it was taken at.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, u64)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::config(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != "f64" {
        return Err(Error::config(format!("unsupported checkpoint dtype {}", manifest.dtype)));
    }
    let blob = std::fs::read(dir.join(CHECKPOINT_BLOB))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Format {
            offset: blob.len() as u64,
            record: 0,
            message: format!("tensor blob has {} bytes, manifest declares {}", blob.len(), manifest.blob_bytes),
        });
    }
    let mut store = ParamStore::new();
    for (i, e) in manifest.tensors.into_iter().enumerate() {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Format {
                offset: e.offset,
                record: i,
                message: format!("tensor {} runs past the end of the blob", e.name),
            });
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    let params = ModelParams {
        config: manifest.config,
        store,
    };
    params.check_layout()?;
    Ok((params, manifest.step))
}
