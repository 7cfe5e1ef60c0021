//! Checkpoint layout: `<stem>.json` manifest plus `<stem>.bin`, a flat blob
//! of little-endian `f64` values. Entry `offset` is in bytes from the start
//! of the blob; entries are stored back to back in store order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "concat-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub blob: String,
    pub total_bytes: u64,
    pub entries: Vec<CheckpointEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save_checkpoint(store: &ParamStore, stem: &Path) -> Result<CheckpointManifest> {
    let (json_path, bin_path) = paths(stem);
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let t = store.get(id);
        entries.push(CheckpointEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            trainable: store.is_trainable(id),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        dtype: "f64-le".to_string(),
        blob: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        total_bytes: blob.len() as u64,
        entries,
    };
    if let Some(dir) = json_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&bin_path, &blob)?;
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(stem: &Path) -> Result<ParamStore> {
    let (json_path, bin_path) = paths(stem);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    let blob = fs::read(&bin_path)?;
    if blob.len() as u64 != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("entry `{}` runs past the end of the blob", e.name))
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.trainable)?;
    }
    Ok(store)
}
