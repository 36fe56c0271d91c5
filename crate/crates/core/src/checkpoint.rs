//! Named-tensor archive: `SMRTCKPT`, a little-endian `u32` manifest length,
//! a JSON manifest, then the tensor blob.
//!
//! The manifest lists every tensor's name, shape, byte offset and length,
//! the element type, a SHA-256 of the blob, and caller metadata. Writes go
//! to a temporary file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMRTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub sha256: String,
    pub meta: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_archive<T: Scalar>(meta: &serde_json::Value, tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len();
        for &x in t.data() {
            x.write_le(&mut blob);
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        dtype: T::DTYPE,
        tensors: entries,
        blob_bytes: blob.len(),
        sha256: sha256_hex(&blob),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

/// Parses and verifies an archive. Tensors stored in another float width
/// are converted.
pub fn decode_archive<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let corrupt = |reason: String| Error::Corruption {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing checkpoint magic".into()));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| corrupt("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    if manifest.version > FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", manifest.version)));
    }
    let blob = &bytes[12 + mlen..];
    if blob.len() != manifest.blob_bytes {
        return Err(corrupt(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if sha256_hex(blob) != manifest.sha256 {
        return Err(corrupt("checksum mismatch".into()));
    }
    let width = match manifest.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(e.offset..e.offset + e.len)
            .filter(|r| r.len() == n * width)
            .ok_or_else(|| corrupt(format!("tensor {} out of bounds", e.name)))?;
        let data = raw
            .chunks_exact(width)
            .map(|c| match manifest.dtype {
                DType::F32 => T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                DType::F64 => T::lit(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)));
    }
    Ok((manifest, out))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_archive<T: Scalar>(path: &Path, meta: &serde_json::Value, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    write_atomic(path, &encode_archive(meta, tensors))
}

pub fn load_archive<T: Scalar>(path: &Path) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes, path)
}
