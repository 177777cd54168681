//! Checkpoint and bank serialization.
//!
//! A checkpoint is a pair of files sharing a stem: `<stem>.f32` holds every
//! tensor concatenated as raw little-endian 32-bit floats, and `<stem>.json`
//! is a manifest listing tensor names, shapes, and element offsets plus
//! free-form metadata (architecture tag, dimensionality, momentum, seed,
//! epoch, ...).

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "cidfd-tensors-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
    /// Element count (product of shape).
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// A named f32 tensor staged for writing or produced by reading.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

/// Writes `<stem>.f32` and `<stem>.json`.
pub fn save_tensors(stem: &Path, tensors: &[NamedTensor], meta: serde_json::Value) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    let total: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut blob = vec![0u8; total * 4];
    for t in tensors {
        let expect: usize = t.shape.iter().product();
        if expect != t.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} declares shape {:?} ({} elements) but carries {}",
                t.name,
                t.shape,
                expect,
                t.data.len()
            )));
        }
        LittleEndian::write_f32_into(&t.data, &mut blob[offset * 4..(offset + t.data.len()) * 4]);
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.data.len(),
        });
        offset += t.data.len();
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        tensors: entries,
        meta,
    };
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let blob_path = path_with_ext(stem, "f32");
    let json_path = path_with_ext(stem, "json");
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Reads back a `<stem>.f32` / `<stem>.json` pair.
pub fn load_tensors(stem: &Path) -> Result<(Vec<NamedTensor>, serde_json::Value)> {
    let blob_path = path_with_ext(stem, "f32");
    let json_path = path_with_ext(stem, "json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::format(
            &json_path,
            format!("unknown format tag {:?}", manifest.format),
        ));
    }
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::format(&blob_path, "blob length not a multiple of 4"));
    }
    let n_elems = blob.len() / 4;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let expect: usize = e.shape.iter().product();
        if expect != e.len {
            return Err(Error::format(
                &json_path,
                format!("tensor {}: shape/len mismatch", e.name),
            ));
        }
        let end = e.offset.checked_add(e.len).filter(|&end| end <= n_elems);
        let Some(end) = end else {
            return Err(Error::format(
                &json_path,
                format!("tensor {} extends past the blob", e.name),
            ));
        };
        let mut data = vec![0f32; e.len];
        LittleEndian::read_f32_into(&blob[e.offset * 4..end * 4], &mut data);
        out.push(NamedTensor::new(e.name.clone(), e.shape.clone(), data));
    }
    Ok((out, manifest.meta))
}

fn path_with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}
