//! Checkpoint container: a safetensors payload plus a JSON manifest that
//! echoes shapes, dtype, a content hash and the producing configuration.
//!
//! Layout for a checkpoint named `foo` in `dir`:
//!
//! ```text
//! dir/foo.safetensors   tensor payload
//! dir/foo.json          CheckpointManifest
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::nn::hash_tensors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// What the payload is, e.g. `encoder`, `decoder`, `generator`.
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    /// Hash of names, shapes and values; see [`hash_tensors`].
    pub content_hash: String,
    /// SHA-256 of the payload file bytes.
    pub file_sha256: String,
    /// Free-form metadata: config echo, upstream hashes, step counts.
    pub meta: serde_json::Value,
}

pub fn payload_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.safetensors"))
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save(
    dir: &Path,
    name: &str,
    kind: &str,
    tensors: &BTreeMap<String, Tensor>,
    meta: serde_json::Value,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).at(dir)?;
    let payload = payload_path(dir, name);
    let map: HashMap<String, Tensor> = tensors
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
        .collect::<Result<_>>()?;
    candle_core::safetensors::save(&map, &payload)?;
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        tensors: tensors
            .iter()
            .map(|(k, v)| TensorEntry {
                name: k.clone(),
                shape: v.dims().to_vec(),
                dtype: format!("{:?}", v.dtype()).to_lowercase(),
            })
            .collect(),
        content_hash: hash_tensors(tensors)?,
        file_sha256: sha256_file(&payload)?,
        meta,
    };
    let path = manifest_path(dir, name);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path, name: &str) -> Result<CheckpointManifest> {
    let path = manifest_path(dir, name);
    let text = fs::read_to_string(&path).at(&path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Load and verify a checkpoint. `kind` must match the manifest.
pub fn load(dir: &Path, name: &str, kind: &str) -> Result<(BTreeMap<String, Tensor>, CheckpointManifest)> {
    let manifest = read_manifest(dir, name)?;
    if manifest.kind != kind {
        return Err(Error::State(format!(
            "checkpoint {name} is a {} checkpoint, expected {kind}",
            manifest.kind
        )));
    }
    let payload = payload_path(dir, name);
    let loaded = candle_core::safetensors::load(&payload, &Device::Cpu)?;
    let tensors: BTreeMap<String, Tensor> = loaded.into_iter().collect();
    let found = hash_tensors(&tensors)?;
    if found != manifest.content_hash {
        return Err(Error::HashMismatch {
            what: format!("checkpoint {name}"),
            expected: manifest.content_hash.clone(),
            found,
        });
    }
    Ok((tensors, manifest))
}

/// Split `prefix.rest` keys into the subset under `prefix`, with the prefix removed.
pub fn strip_prefix(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}

pub fn with_prefix(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    tensors.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn save_load_roundtrip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = BTreeMap::new();
        t.insert("b.w".to_string(), Tensor::arange(0f32, 6.0, &Device::Cpu).unwrap().reshape((2, 3)).unwrap());
        t.insert("a".to_string(), Tensor::ones(4, DType::F32, &Device::Cpu).unwrap());
        let m1 = save(dir.path(), "x", "test", &t, serde_json::json!({"k": 1})).unwrap();
        let m2 = save(dir.path(), "y", "test", &t, serde_json::json!({"k": 1})).unwrap();
        assert_eq!(m1.file_sha256, m2.file_sha256);
        let (back, man) = load(dir.path(), "x", "test").unwrap();
        assert_eq!(man.content_hash, m1.content_hash);
        assert_eq!(back.len(), 2);
        assert!(load(dir.path(), "x", "other").is_err());
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = BTreeMap::new();
        t.insert("w".to_string(), Tensor::ones(3, DType::F32, &Device::Cpu).unwrap());
        save(dir.path(), "x", "test", &t, serde_json::Value::Null).unwrap();
        let mut other = BTreeMap::new();
        other.insert("w".to_string(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        let map: HashMap<String, Tensor> = other.into_iter().collect();
        candle_core::safetensors::save(&map, payload_path(dir.path(), "x")).unwrap();
        assert!(matches!(load(dir.path(), "x", "test"), Err(Error::HashMismatch { .. })));
    }
}
