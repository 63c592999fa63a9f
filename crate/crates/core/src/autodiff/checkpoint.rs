//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FRCKPT\0\0"
//! version  u32
//! mlen     u64      manifest length in bytes
//! manifest mlen bytes of JSON: dtype, tensor table (name, shape, offset, len), meta
//! payload  raw little-endian values, tensors back to back in table order
//! ```

use serde::{Deserialize, Serialize};

use super::graph::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FRCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn encode<T: Real>(params: &ParamSet<T>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let width = std::mem::size_of::<T>();
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            };
            offset += t.len() * width;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        format: "filtrank-checkpoint".into(),
        dtype: T::DTYPE.into(),
        tensors,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(20 + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in params.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(ParamSet<T>, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize
        .checked_add(mlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..body])?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {}, requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let payload = &bytes[body..];
    let width = std::mem::size_of::<T>();
    let mut params = ParamSet::new();
    for e in manifest.tensors {
        let end = e.offset + e.len * width;
        if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Checkpoint(format!("tensor {} out of bounds", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(width)
            .map(T::read_le)
            .collect();
        params.add(e.name, Tensor::from_vec(&e.shape, data)?);
    }
    Ok((params, manifest.meta))
}
