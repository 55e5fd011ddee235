//! Binary checkpoints.
//!
//! Layout: `IVTL`, version (u32 LE), manifest length (u64 LE), UTF-8 JSON
//! manifest, then every parameter as contiguous f32 LE values in manifest order.
//! Offsets in the manifest are relative to the start of the data section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::scalar::Scalar;
use crate::substrate::Tensor;

pub const MAGIC: &[u8; 4] = b"IVTL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    /// Curriculum stage that produced the weights, when known.
    pub stage: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<S: Scalar>(params: &Params<S>, stage: Option<usize>) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        model: params.config().clone(),
        stage,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(m: impl Into<String>) -> Error {
    Error::Format(m.into())
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(Params<S>, Manifest)> {
    if bytes.len() < 16 {
        return Err(format_err("checkpoint shorter than its header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let data_start = 16u64
        .checked_add(mlen)
        .filter(|e| *e <= bytes.len() as u64)
        .ok_or_else(|| format_err("manifest runs past end of file"))? as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| format_err(format!("manifest: {e}")))?;
    let data = &bytes[data_start..];
    let mut expected = 0u64;
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.offset != expected {
            return Err(format_err(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let end = expected + 4 * n as u64;
        if end > data.len() as u64 {
            return Err(format_err(format!("truncated data in tensor {}", e.name)));
        }
        let values = data[expected as usize..end as usize]
            .chunks_exact(4)
            .map(|c| S::narrow(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
        expected = end;
    }
    if expected != data.len() as u64 {
        return Err(format_err(format!("{} trailing bytes after the last tensor", data.len() as u64 - expected)));
    }
    let params = Params::from_tensors(&manifest.model, named).map_err(|e| format_err(e.to_string()))?;
    if !params.is_finite() {
        return Err(format_err("checkpoint holds non-finite values"));
    }
    Ok((params, manifest))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(params: &Params<S>, stage: Option<usize>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(params, stage)?)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Params<S>, Manifest)> {
    from_bytes(&fs::read(path)?)
}
