//! Checkpoints: a JSON manifest plus a flat little-endian blob.
//!
//! `manifest.json` lists every tensor as `{name, shape, offset, dtype}`,
//! where `offset` is a byte offset into `params.bin` and tensors are stored
//! row-major, back to back. The manifest also records the SHA-256 of the
//! blob, the model config and the identity biases.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DnaError, Result};
use crate::model::{DnaConfig, DnaModel};
use crate::tensor::{DType, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
pub const FORMAT: &str = "dna-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub blob_bytes: usize,
    pub sha256: String,
    pub config: DnaConfig,
    pub tensors: Vec<TensorEntry>,
    /// `biases[step][module]`.
    pub biases: Vec<Vec<f64>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `dir/manifest.json` and `dir/params.bin`, creating `dir`.
pub fn save<T: Scalar>(model: &DnaModel<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DnaError::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: blob.len(),
            dtype: T::DTYPE,
        });
        for &v in p.tensor.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: BLOB.into(),
        blob_bytes: blob.len(),
        sha256: sha256_hex(&blob),
        config: model.config.clone(),
        tensors,
        biases: model.bias.all_biases().to_vec(),
    };
    let blob_path = dir.join(BLOB);
    std::fs::write(&blob_path, &blob).map_err(|e| DnaError::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    std::fs::write(&manifest_path, text).map_err(|e| DnaError::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| DnaError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| DnaError::Checkpoint {
        path,
        reason: e.to_string(),
    })
}

fn read_value<T: Scalar>(bytes: &[u8], dtype: DType) -> T {
    match dtype {
        DType::F32 => T::from_f64_lossy(f32::read_le(bytes) as f64),
        DType::F64 => T::from_f64_lossy(f64::read_le(bytes)),
    }
}

/// Loads a checkpoint, verifying the blob checksum and every tensor shape.
/// Values stored at the other precision are converted.
pub fn load<T: Scalar>(dir: &Path) -> Result<DnaModel<T>> {
    let manifest = read_manifest(dir)?;
    let err = |reason: String| DnaError::Checkpoint {
        path: PathBuf::from(dir),
        reason,
    };
    if manifest.format != FORMAT {
        return Err(err(format!("unknown format {:?}", manifest.format)));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(|e| DnaError::io(&blob_path, e))?;
    let actual = sha256_hex(&blob);
    if actual != manifest.sha256 {
        return Err(DnaError::Checksum {
            path: blob_path,
            expected: manifest.sha256,
            actual,
        });
    }
    let mut model = DnaModel::<T>::new(manifest.config.clone(), 0)?;
    if manifest.tensors.len() != model.params.len() {
        return Err(err(format!(
            "manifest has {} tensors, the config implies {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = model
            .params
            .id(&entry.name)
            .ok_or_else(|| err(format!("unexpected tensor {}", entry.name)))?;
        let expected = model.params.get(id).shape().to_vec();
        if entry.shape != expected {
            return Err(err(format!("{} has shape {:?}, expected {:?}", entry.name, entry.shape, expected)));
        }
        let n: usize = entry.shape.iter().product();
        let size = entry.dtype.size_of();
        let end = entry.offset + n * size;
        if end > blob.len() {
            return Err(err(format!("{} runs past the end of the blob", entry.name)));
        }
        let data = blob[entry.offset..end]
            .chunks_exact(size)
            .map(|b| read_value::<T>(b, entry.dtype))
            .collect();
        *model.params.get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
    }
    model.bias.set_biases(manifest.biases)?;
    Ok(model)
}
