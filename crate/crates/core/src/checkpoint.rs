//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `CDRMTCKP`, little-endian u32 version, little-endian
//! u32 manifest byte length, UTF-8 JSON manifest mapping parameter names to
//! shape and byte offset, then a contiguous little-endian f32 payload.
//! Values are stored at f32 precision; loading restores them as f64.

use crate::tensor::{ParamStore, Tensor2D, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CDRMTCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint parameter `{name}` has shape {got:?}, model expects {want:?}")]
    ShapeMismatch {
        name: String,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    shape: [usize; 2],
    offset: u64,
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut manifest: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for p in store.iter() {
        manifest.insert(
            p.name.clone(),
            ManifestEntry {
                shape: [p.value.rows(), p.value.cols()],
                offset: payload.len() as u64,
            },
        );
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

/// Load parameter values into an already-registered store; every store
/// parameter must be present with the right shape.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Truncated("header".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)
        .map_err(|_| CheckpointError::Truncated("version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    f.read_exact(&mut u32buf)
        .map_err(|_| CheckpointError::Truncated("manifest length".into()))?;
    let manifest_len = u32::from_le_bytes(u32buf) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_bytes)
        .map_err(|_| CheckpointError::Truncated("manifest".into()))?;
    let manifest: BTreeMap<String, ManifestEntry> = serde_json::from_slice(&manifest_bytes)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    // stage everything first so a bad file leaves no partial model
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let mut staged: Vec<(String, Tensor2D)> = Vec::with_capacity(names.len());
    for name in names {
        let entry = manifest
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        let want = store.value(&name)?.shape();
        let got = (entry.shape[0], entry.shape[1]);
        if got != want {
            return Err(CheckpointError::ShapeMismatch { name, got, want });
        }
        let count = got.0 * got.1;
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > payload.len() {
            return Err(CheckpointError::Truncated(format!("payload of `{name}`")));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        staged.push((name, Tensor2D::from_vec(got.0, got.1, data)?));
    }
    for (name, value) in staged {
        store.set_value(&name, value)?;
    }
    Ok(())
}
