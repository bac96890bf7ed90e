//! Checkpoint files: `"T2SD"`, a little-endian u32 version, a little-endian
//! u32 manifest length, the JSON manifest, then the f32 little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"T2SD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Aligner,
    Diffusion,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Vae => "vae",
            ModelKind::Aligner => "aligner",
            ModelKind::Diffusion => "diffusion",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// Decodes the config snapshot into its typed form.
    pub fn config<C: serde::de::DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }
}

/// Serializes a checkpoint; identical inputs give identical bytes.
pub fn encode_checkpoint<T: Scalar>(params: &ParamStore<T>, kind: ModelKind, config: &impl Serialize) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(params.numel() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: payload.len() as u64,
        });
        for &x in t.data() {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        kind,
        config: serde_json::to_value(config)?,
        tensors,
        payload_bytes: payload.len() as u64,
        crc32: crc32fast::hash(&payload),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(json.len()).map_err(|_| Error::invalid("manifest too large"))?.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes atomically: the bytes go to a temporary file in the target
/// directory, which is then renamed over `path`.
pub fn save_checkpoint<T: Scalar>(
    params: &ParamStore<T>,
    kind: ModelKind,
    config: &impl Serialize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_checkpoint(params, kind, config)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn split(path: &Path, bytes: &[u8]) -> Result<(Manifest, usize)> {
    let bad = |msg: String| Error::Checkpoint { path: path.to_owned(), msg };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + mlen;
    if bytes.len() < body {
        return Err(bad("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(format!("manifest: {e}")))?;
    Ok((manifest, body))
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint { path: path.to_owned(), msg };
    let (manifest, start) = split(path, bytes)?;
    let payload = &bytes[start..];
    if (payload.len() as u64) < manifest.payload_bytes {
        return Err(bad(format!("truncated payload: {} of {} bytes", payload.len(), manifest.payload_bytes)));
    }
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(bad("trailing bytes after payload".into()));
    }
    if crc32fast::hash(payload) != manifest.crc32 {
        return Err(bad("checksum mismatch".into()));
    }
    let mut params = ParamStore::new();
    let mut next = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(bad(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let end = e.offset + 4 * numel as u64;
        if e.offset < next || end > manifest.payload_bytes {
            return Err(bad(format!("tensor `{}` lies outside the payload or overlaps another", e.name)));
        }
        next = end;
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(e.name.clone(), Tensor::from_vec(&e.shape, data).map_err(|err| bad(err.to_string()))?)?;
    }
    Ok(Checkpoint { kind: manifest.kind, config: manifest.config, params })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(path, &fs::read(path)?)
}

/// Reads only the manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    Ok(split(path, &fs::read(path)?)?.0)
}

/// Loads a checkpoint and checks that it holds the expected model.
pub fn load_kind(path: impl AsRef<Path>, kind: ModelKind) -> Result<Checkpoint> {
    let path = path.as_ref();
    let ck = load_checkpoint(path)?;
    if ck.kind != kind {
        return Err(Error::Checkpoint { path: path.to_owned(), msg: format!("holds a {} model, expected {kind}", ck.kind) });
    }
    Ok(ck)
}
