//! Parameter checkpoints: a JSON manifest next to a raw little-endian `f64`
//! blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MANIFEST: &str = "checkpoint.json";
const BLOB: &str = "checkpoint.bin";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<Entry>,
    pub metadata: serde_json::Value,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

/// Writes named tensors and free-form metadata into `dir`.
pub fn save<'a>(
    dir: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    metadata: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64-le".into(),
            offset: blob.len(),
            len: t.numel(),
        });
        for v in t.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(BLOB), &blob)?;
    let manifest = Manifest { tensors: entries, metadata };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads every tensor in a checkpoint, in manifest order.
pub fn load(dir: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != "f64-le" {
            return Err(Error::CheckpointMismatch(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let end = e.offset + 8 * e.len;
        if end > blob.len() {
            return Err(Error::CheckpointMismatch(format!("{}: blob truncated", e.name)));
        }
        let values = blob[e.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape, values).map_err(|err| Error::CheckpointMismatch(err.to_string()))?;
        out.push((e.name, t));
    }
    Ok((out, manifest.metadata))
}

/// Overwrites the values in `store` from a checkpoint; names and shapes must
/// match one to one.
pub fn restore(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("unknown tensor {name}")))?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::CheckpointMismatch(format!(
                "{name}: shape {:?} vs {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.values_mut().copy_from_slice(t.values());
    }
    Ok(())
}
