//! Model checkpoints: a JSON manifest describing named tensors plus one flat
//! blob of little-endian `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Registry;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32_le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Encoder,
    Dynamics,
    Thetas,
    Dmd,
}

impl CheckpointKind {
    pub fn stem(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Dynamics => "dynamics",
            Self::Thetas => "thetas",
            Self::Dmd => "dmd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub dtype: String,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    /// Resolved experiment configuration of the producing run.
    pub config: serde_json::Value,
    /// Kind-specific scalars (ranks, stage names, ...).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub entries: Vec<TensorEntry>,
    pub data: Vec<f32>,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
}

pub fn manifest_path(dir: &Path, kind: CheckpointKind) -> PathBuf {
    dir.join(format!("{}.json", kind.stem()))
}

pub fn blob_path(dir: &Path, kind: CheckpointKind) -> PathBuf {
    dir.join(format!("{}.bin", kind.stem()))
}

pub fn exists(dir: &Path, kind: CheckpointKind) -> bool {
    manifest_path(dir, kind).exists()
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind) -> Self {
        Self {
            kind,
            entries: Vec::new(),
            data: Vec::new(),
            config: serde_json::Value::Null,
            meta: serde_json::Value::Null,
        }
    }

    /// Appends a tensor, rounding to `f32`.
    pub fn push(&mut self, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension {
                expected: numel,
                got: values.len(),
            });
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Structural(format!("duplicate tensor name {name:?}")));
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len() * 4,
        });
        self.data.extend(values.iter().map(|&v| v as f32));
        Ok(())
    }

    /// One tensor per registry entry, prefixed with `prefix`.
    pub fn push_registry(&mut self, prefix: &str, reg: &Registry, values: &[f64]) -> Result<()> {
        if values.len() != reg.len {
            return Err(Error::Dimension {
                expected: reg.len,
                got: values.len(),
            });
        }
        for e in &reg.entries {
            self.push(
                &format!("{prefix}{}", e.name),
                &e.shape,
                &values[e.offset..e.offset + e.len()],
            )?;
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Structural(format!("{} checkpoint has no tensor {name:?}", self.kind.stem())))
    }

    pub fn tensor_f32(&self, name: &str) -> Result<&[f32]> {
        let e = self.entry(name)?;
        Ok(&self.data[e.offset / 4..e.offset / 4 + e.numel()])
    }

    pub fn tensor(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.tensor_f32(name)?.iter().map(|&v| v as f64).collect())
    }

    /// Reassembles a flat parameter vector in registry order, checking
    /// every name and shape.
    pub fn read_registry(&self, prefix: &str, reg: &Registry) -> Result<Vec<f64>> {
        let mut out = vec![0.0; reg.len];
        for e in &reg.entries {
            let name = format!("{prefix}{}", e.name);
            let stored = self.entry(&name)?;
            if stored.shape != e.shape {
                return Err(Error::Structural(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    stored.shape, e.shape
                )));
            }
            out[e.offset..e.offset + e.len()].copy_from_slice(&self.tensor(&name)?);
        }
        Ok(out)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: CHECKPOINT_VERSION,
            kind: self.kind,
            dtype: DTYPE.to_string(),
            blob_bytes: self.data.len() * 4,
            tensors: self.entries.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Writes `<kind>.json` and `<kind>.bin` into `dir`; refuses to
    /// overwrite an existing checkpoint of the same kind.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (mpath, bpath) = (manifest_path(dir, self.kind), blob_path(dir, self.kind));
        if mpath.exists() || bpath.exists() {
            return Err(Error::OutputExists(mpath));
        }
        fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bpath, blob)?;
        fs::write(&mpath, serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn load(dir: &Path, kind: CheckpointKind) -> Result<Self> {
        let (mpath, bpath) = (manifest_path(dir, kind), blob_path(dir, kind));
        for p in [&mpath, &bpath] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        let fail = |offset: usize, message: String| Error::Load {
            path: mpath.clone(),
            offset: offset as u64,
            message,
        };
        if manifest.format_version != CHECKPOINT_VERSION || manifest.dtype != DTYPE {
            return Err(fail(
                0,
                format!(
                    "unsupported checkpoint {} / {}",
                    manifest.format_version, manifest.dtype
                ),
            ));
        }
        if manifest.kind != kind {
            return Err(fail(
                0,
                format!("expected a {} checkpoint, found {}", kind.stem(), manifest.kind.stem()),
            ));
        }
        let bytes = fs::read(&bpath)?;
        if bytes.len() != manifest.blob_bytes || bytes.len() % 4 != 0 {
            return Err(Error::Load {
                path: bpath,
                offset: bytes.len() as u64,
                message: format!(
                    "blob holds {} bytes, manifest declares {}",
                    bytes.len(),
                    manifest.blob_bytes
                ),
            });
        }
        let mut expected = 0;
        for e in &manifest.tensors {
            if e.offset != expected {
                return Err(fail(
                    e.offset,
                    format!("tensor {:?} starts at {}, expected {expected}", e.name, e.offset),
                ));
            }
            expected += e.numel() * 4;
        }
        if expected != bytes.len() {
            return Err(fail(
                expected,
                format!("tensor shapes cover {expected} bytes of {}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            kind,
            entries: manifest.tensors,
            data,
            config: manifest.config,
            meta: manifest.meta,
        })
    }
}
