//! Network checkpoints: one directory per network holding a little-endian
//! `f32` blob per parameter tensor and a `manifest.json`.

use std::fs;
use std::path::Path;

use anodet3d_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json_atomic};
use crate::networks::{NetworkParams, NetworkSpec, Role};
use crate::training::Stage;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub role: Role,
    pub spec: NetworkSpec,
    pub step_count: u64,
    pub seed: u64,
    pub created_by_stage: Option<Stage>,
    pub config_hash: String,
    pub tool_version: String,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `params` into `dir`, replacing any previous checkpoint atomically.
pub fn save_checkpoint(params: &NetworkParams<f32>, dir: &Path, config_hash: &str) -> Result<()> {
    let mut staging = dir.as_os_str().to_owned();
    staging.push(".tmp");
    let staging = std::path::PathBuf::from(staging);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let mut entries = Vec::with_capacity(params.tensors.len());
    for (name, t) in &params.tensors {
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(&staging.join(&file), &bytes)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        role: params.role,
        spec: params.spec.clone(),
        step_count: params.step_count,
        seed: params.seed,
        created_by_stage: params.stage,
        config_hash: config_hash.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        tensors: entries,
    };
    write_json_atomic(&staging.join(MANIFEST), &manifest)?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(NetworkParams<f32>, CheckpointManifest)> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Format {
                path,
                reason: format!("{} needs {} bytes, found {}", entry.name, n * 4, bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)));
    }
    let params = NetworkParams {
        role: manifest.role,
        spec: manifest.spec.clone(),
        tensors,
        step_count: manifest.step_count,
        seed: manifest.seed,
        stage: manifest.created_by_stage,
    };
    params.check_layout().map_err(|e| Error::Format {
        path: manifest_path,
        reason: e.to_string(),
    })?;
    Ok((params, manifest))
}
