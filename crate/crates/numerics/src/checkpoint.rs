//! Parameter checkpoints: a JSON manifest plus a blob of little-endian `f32`.
//!
//! Values are narrowed to `f32` on save. Loading widens back to `f64`, which
//! is exact, so save → load → save reproduces the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::param::Module;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub params: Vec<ManifestEntry>,
}

const FORMAT: &str = "f32-le";

/// Manifest and blob bytes for `module`, in visit order.
pub fn encode(module: &dyn Module, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut params = Vec::new();
    let mut blob = Vec::new();
    module.visit(&mut |p| {
        params.push(ManifestEntry {
            name: p.name().to_string(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in p.value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let manifest = Manifest {
        format: FORMAT.to_string(),
        blob: blob_name.to_string(),
        params,
    };
    (manifest, blob)
}

/// Writes `<stem>.json` and `<stem>.bin` next to each other.
pub fn save(module: &dyn Module, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let blob_name = bin_path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("params.bin")
        .to_string();
    let (manifest, blob) = encode(module, &blob_name);
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(&bin_path, blob)?;
    Ok((json_path, bin_path))
}

/// Restores values into `module`; names and shapes must match the manifest.
pub fn decode_into(module: &mut dyn Module, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    if manifest.format != FORMAT {
        return Err(NumericsError::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let mut idx = 0;
    let mut failure: Option<String> = None;
    module.visit_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = manifest.params.get(idx) else {
            failure = Some(format!("manifest has no entry for {}", p.name()));
            return;
        };
        idx += 1;
        if entry.name != p.name() || entry.shape != p.value.shape() {
            failure = Some(format!(
                "manifest entry {} {:?} does not match parameter {} {:?}",
                entry.name,
                entry.shape,
                p.name(),
                p.value.shape()
            ));
            return;
        }
        let n = p.value.len();
        let end = entry.offset + 4 * n;
        if end > blob.len() {
            failure = Some(format!("blob too short for {}", entry.name));
            return;
        }
        for (v, chunk) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(blob[entry.offset..end].chunks_exact(4))
        {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    });
    if let Some(msg) = failure {
        return Err(NumericsError::Checkpoint(msg));
    }
    if idx != manifest.params.len() {
        return Err(NumericsError::Checkpoint(format!(
            "manifest lists {} params, module has {}",
            manifest.params.len(),
            idx
        )));
    }
    Ok(())
}

pub fn load(module: &mut dyn Module, stem: &Path) -> Result<()> {
    let json_path = stem.with_extension("json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    let bin_path = json_path.with_file_name(&manifest.blob);
    let blob = fs::read(bin_path)?;
    decode_into(module, &manifest, &blob)
}
