//! Binary checkpoint format.
//!
//! ```text
//! "DSTL"                      4 bytes magic
//! version                     u32
//! config_len                  u64
//! config                      config_len bytes of UTF-8 JSON (ViTConfig)
//! count                       u64
//! count x {
//!     name_len                u64
//!     name                    name_len bytes of UTF-8
//!     rank                    u32
//!     dims                    rank x u64
//!     data                    prod(dims) x f32
//! }
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::config::ViTConfig;
use super::params::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DSTL";
pub const VERSION: u32 = 1;

pub fn encode(cfg: &ViTConfig, params: &ParamSet<f32>) -> Result<Vec<u8>> {
    params.check_layout(cfg)?;
    let json = serde_json::to_vec(cfg)?;
    let mut out = Vec::with_capacity(64 + json.len() + params.num_params() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.tensors().len() as u64).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// A length field that must fit in what is left of the buffer.
    fn len(&mut self, what: &str, elem_size: usize) -> Result<usize> {
        let at = self.pos as u64;
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(elem_size as u64).is_none_or(|b| b > left) {
            return Err(Error::format(at, format!("{what} {n} exceeds remaining {left} bytes")));
        }
        Ok(n as usize)
    }
}

/// Parses a checkpoint and validates every tensor against the embedded
/// config.
pub fn decode(bytes: &[u8]) -> Result<(ViTConfig, ParamSet<f32>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected DSTL"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let json_len = r.len("config length", 1)?;
    let json_at = r.pos as u64;
    let cfg: ViTConfig = serde_json::from_slice(r.take(json_len, "config")?)
        .map_err(|e| Error::format(json_at, format!("config json: {e}")))?;
    cfg.validate()
        .map_err(|e| Error::format(json_at, e.to_string()))?;

    let count_at = r.pos as u64;
    let count = r.len("tensor count", 1)?;
    let expected = super::params::layout(&cfg);
    if count != expected.len() {
        return Err(Error::format(
            count_at,
            format!("{count} tensors, config implies {}", expected.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let at = r.pos as u64;
        let name_len = r.len("name length", 1)?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(at, format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        if name != *want_name || shape != *want_shape {
            return Err(Error::format(
                at,
                format!("tensor {name} {shape:?} does not match config ({want_name} {want_shape:?})"),
            ));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after tensor table"));
    }
    Ok((cfg, ParamSet::from_tensors(tensors)))
}

pub fn save(path: &Path, cfg: &ViTConfig, params: &ParamSet<f32>) -> Result<()> {
    let bytes = encode(cfg, params)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ViTConfig, ParamSet<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
