//! Dense 3D scalar volumes and their on-disk format.
//!
//! A volume `<name>` is stored as two files: `<name>.vol` holding raw
//! little-endian `f32` samples in z, y, x order, and a `<name>.json` sidecar
//! describing shape, spacing and intensity domain.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IntensityDomain {
    Hu,
    Normalized,
    Arbitrary,
}

impl IntensityDomain {
    pub fn name(self) -> &'static str {
        match self {
            IntensityDomain::Hu => "HU",
            IntensityDomain::Normalized => "NORMALIZED",
            IntensityDomain::Arbitrary => "ARBITRARY",
        }
    }
}

/// Row-major 3D grid with axis order (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    domain: IntensityDomain,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        spacing_mm: [f64; 3],
        domain: IntensityDomain,
        data: Vec<f64>,
    ) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidVolume(format!("shape {shape:?} has a zero axis")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidVolume(format!(
                "shape {shape:?} needs {} samples, buffer has {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!("spacing {spacing_mm:?} must be positive")));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite sample {v}")));
        }
        if domain == IntensityDomain::Normalized {
            if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                return Err(Error::InvalidVolume(format!(
                    "normalized volume holds {v} outside [-1, 1]"
                )));
            }
        }
        Ok(Volume {
            shape,
            spacing_mm,
            domain,
            data,
        })
    }

    pub fn filled(shape: [usize; 3], domain: IntensityDomain, value: f64) -> Result<Self> {
        Self::new(shape, [1.0; 3], domain, vec![value; shape.iter().product()])
    }

    /// Builds a volume by evaluating `f(z, y, x)` at every voxel.
    pub fn from_fn(
        shape: [usize; 3],
        domain: IntensityDomain,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(shape, [1.0; 3], domain, data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn domain(&self) -> IntensityDomain {
        self.domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn with_spacing(mut self, spacing_mm: [f64; 3]) -> Result<Self> {
        self.spacing_mm = spacing_mm;
        Self::new(self.shape, self.spacing_mm, self.domain, self.data)
    }

    /// Same geometry, new samples and domain (validated).
    pub fn with_data(&self, domain: IntensityDomain, data: Vec<f64>) -> Result<Self> {
        Self::new(self.shape, self.spacing_mm, domain, data)
    }

    /// SHA-256 over the sidecar fields and the `f32le` payload.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.sidecar()).expect("sidecar serializes"));
        h.update(self.payload());
        hex::encode(h.finalize())
    }

    fn sidecar(&self) -> Sidecar {
        Sidecar {
            shape: self.shape,
            spacing_mm: self.spacing_mm,
            intensity_domain: self.domain,
            dtype: DTYPE.to_string(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        bytes
    }

    /// Writes `<stem>.vol` and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let (vol, json) = volume_paths(stem.as_ref());
        if let Some(parent) = vol.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        crate::io::write_atomic(&vol, &self.payload())?;
        let sidecar = serde_json::to_vec_pretty(&self.sidecar())?;
        crate::io::write_atomic(&json, &sidecar)
    }

    /// Reads `<stem>.vol` + `<stem>.json`, rejecting any size disagreement.
    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (vol, json) = volume_paths(stem.as_ref());
        let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::Format {
            path: json.clone(),
            reason: e.to_string(),
        })?;
        if sidecar.dtype != DTYPE {
            return Err(Error::Format {
                path: json,
                reason: format!("unsupported dtype {:?}", sidecar.dtype),
            });
        }
        let bytes = fs::read(&vol).map_err(|e| Error::io(&vol, e))?;
        let voxels: usize = sidecar.shape.iter().product();
        if bytes.len() != voxels * 4 {
            return Err(Error::Format {
                path: vol,
                reason: format!(
                    "shape {:?} needs {} bytes, file has {}",
                    sidecar.shape,
                    voxels * 4,
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Volume::new(sidecar.shape, sidecar.spacing_mm, sidecar.intensity_domain, data).map_err(
            |e| Error::Format {
                path: vol,
                reason: e.to_string(),
            },
        )
    }
}

const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    intensity_domain: IntensityDomain,
    dtype: String,
}

fn volume_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut vol = stem.as_os_str().to_owned();
    vol.push(".vol");
    let mut json = stem.as_os_str().to_owned();
    json.push(".json");
    (PathBuf::from(vol), PathBuf::from(json))
}

/// Stems (`dir/<name>`) of every volume sidecar in `dir`, sorted by name.
pub fn list_volumes(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "vol") {
            stems.push(path.with_extension(""));
        }
    }
    stems.sort();
    Ok(stems)
}
