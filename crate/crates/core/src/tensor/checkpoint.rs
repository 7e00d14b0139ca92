//! Parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of JSON
//! header, then the raw little-endian IEEE-754 payloads back to back. Each
//! header entry carries `name`, `shape`, `dtype`, and the `offset`/`length`
//! in bytes of its payload, relative to the end of the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numel, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const FORMAT: &str = "defusion-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

/// Parameters plus free-form metadata (model config, preprocessing stats).
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub meta: serde_json::Value,
}

pub fn encode<T: Real>(store: &ParamStore<T>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(store.num_scalars() * T::BYTES);
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let t = store.get(id);
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        params.push(Entry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            length: payload.len() - offset,
        });
    }
    let header = serde_json::to_vec(&Header { format: FORMAT.into(), version: VERSION, meta: meta.clone(), params })?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..).ok_or_else(|| bad("truncated"))?;
    if hlen > body.len() {
        return Err(bad("header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let payload = &body[hlen..];
    let mut params = ParamStore::new();
    for e in header.params {
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` stored as {}, requested {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let n = numel(&e.shape);
        if e.length != n * T::BYTES || e.offset + e.length > payload.len() {
            return Err(Error::Checkpoint(format!("parameter `{}` payload out of bounds", e.name)));
        }
        let data = payload[e.offset..e.offset + e.length].chunks_exact(T::BYTES).map(T::read_le).collect();
        params.add(e.name, Tensor::new(&e.shape, data)?)?;
    }
    Ok(Checkpoint { params, meta: header.meta })
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>, meta: &serde_json::Value) -> Result<()> {
    fs::write(path, encode(store, meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&fs::read(path)?)
}
