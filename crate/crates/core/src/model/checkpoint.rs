//! Single-file checkpoint archive.
//!
//! ```text
//! b"PSEGCKPT"  u32 version
//! u64 header_len, header JSON {"model": ModelConfig, "meta": any}
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, u64 dims[ndim], f32 LE data
//! sha256 of every preceding byte (32 bytes)
//! ```
//! All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn to_bytes(model: &ModelParams<f32>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header { model: model.config().clone(), meta: meta.clone() })
        .map_err(|e| Error::Serde(e.to_string()))?;
    let mut buf = Vec::with_capacity(model.params.numel() * 4 + header.len() + 1024);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams<f32>, serde_json::Value)> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut model = ModelParams::<f32>::init(&header.model, 0)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!("{count} tensors, architecture has {}", model.params.len())));
    }
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::Checkpoint("tensor name not utf-8".into()))?;
        let id = model.params.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let expected = model.params.get(id).shape().to_vec();
        if dims != expected {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {dims:?}, expected {expected:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        *model.params.get_mut(id) = Tensor::from_vec(&dims, data);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((model, header.meta))
}

/// Writes through a temporary file and renames, so an interrupted save never
/// replaces an existing checkpoint with a partial one.
pub fn save(path: &Path, model: &ModelParams<f32>, meta: &serde_json::Value) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams<f32>, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { widths: [4, 8, 12, 16], embed_dim: 8, heads: 2, head_channels: 2, ..Default::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = ModelParams::<f32>::init(&tiny(), 3).unwrap();
        let meta = serde_json::json!({"epoch": 4});
        let bytes = to_bytes(&m, &meta).unwrap();
        let (back, meta2) = from_bytes(&bytes).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(meta2, meta);
        assert_eq!(to_bytes(&back, &meta).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let m = ModelParams::<f32>::init(&tiny(), 3).unwrap();
        let mut bytes = to_bytes(&m, &serde_json::Value::Null).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(from_bytes(b"garbage").is_err());
    }
}
