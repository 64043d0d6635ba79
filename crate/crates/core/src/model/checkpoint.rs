//! Checkpoint directory: `config.json`, `manifest.json`, and `tensors.bin`
//! (little-endian f64 blobs at the offsets the manifest lists).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

use super::{ModelConfig, ModelError, ModelParams};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("FixtureError: {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("FixtureError: {path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("FixtureError: {0}")]
    Invalid(String),
    #[error("FixtureError: {0}")]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| CheckpointError::Json { path: path.display().to_string(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(io_err(path))
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    config: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<(), CheckpointError> {
    params.check_shapes(config)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        tensors.push(TensorEntry { name, shape: [t.rows(), t.cols()], offset: blob.len() as u64 });
        for v in t.as_slice() {
            blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    write_json(&dir.join(CONFIG_FILE), config)?;
    write_json(&dir.join(MANIFEST_FILE), &Manifest { dtype: "f64".into(), tensors })?;
    let path = dir.join(TENSORS_FILE);
    fs::write(&path, blob).map_err(io_err(&path))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ModelConfig, ModelParams<T>), CheckpointError> {
    let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.dtype != "f64" {
        return Err(CheckpointError::Invalid(format!("unsupported tensor dtype {}", manifest.dtype)));
    }
    let path = dir.join(TENSORS_FILE);
    let blob = fs::read(&path).map_err(io_err(&path))?;

    let mut params = ModelParams::<T>::init(&config, 0)?;
    for (name, slot) in params.named_tensors_mut() {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Invalid(format!("tensor {name} missing from manifest")))?;
        if entry.shape != [slot.rows(), slot.cols()] {
            return Err(CheckpointError::Invalid(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                entry.shape,
                [slot.rows(), slot.cols()]
            )));
        }
        let count = entry.shape[0] * entry.shape[1];
        let start = entry.offset as usize;
        let bytes = blob
            .get(start..start + 8 * count)
            .ok_or_else(|| CheckpointError::Invalid(format!("tensor {name} runs past the end of {TENSORS_FILE}")))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        *slot = DenseMatrix::from_vec(entry.shape[0], entry.shape[1], values).expect("count matches shape");
    }
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig::tiny(2, 8, 16);
        let params = ModelParams::<f64>::init(&config, 3).unwrap();
        save_checkpoint(dir.path(), &config, &params).unwrap();
        let (c2, p2) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(c2, config);
        assert_eq!(p2, params);
        let (_, p32) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(p32, params.cast::<f32>());
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig::tiny(1, 4, 8);
        save_checkpoint(dir.path(), &config, &ModelParams::<f64>::init(&config, 1).unwrap()).unwrap();
        let path = dir.path().join(TENSORS_FILE);
        let mut blob = fs::read(&path).unwrap();
        blob.truncate(blob.len() - 8);
        fs::write(&path, blob).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(CheckpointError::Invalid(_))));
    }
}
