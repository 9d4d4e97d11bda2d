//! Parameter blobs: one little-endian f32 file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub const DTYPE: &str = "f32";

/// Writes every parameter of `store` under `dir` and returns the entries
/// to record in a manifest.
pub fn write_params(dir: &Path, store: &ParamStore) -> Result<Vec<ParamEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(store.len());
    for p in store.iter() {
        let file = format!("{}.bin", p.name);
        let mut bytes = Vec::with_capacity(p.value.len() * 4);
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
    }
    Ok(entries)
}

/// Loads blobs into an already constructed store whose names and shapes
/// must match `entries` one to one.
pub fn read_params(dir: &Path, entries: &[ParamEntry], store: &mut ParamStore) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, manifest lists {}",
            store.len(),
            entries.len()
        )));
    }
    for entry in entries {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        if store.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, manifest says {:?}",
                entry.name,
                store.value(id).shape(),
                entry.shape
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, expected {}",
                entry.file,
                bytes.len(),
                4 * n
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.get_mut(id).value = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(())
}

/// Rounds every parameter to f32 precision in place, so an in-memory model
/// matches what a save/load cycle produces.
pub fn round_to_f32(store: &mut ParamStore) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
