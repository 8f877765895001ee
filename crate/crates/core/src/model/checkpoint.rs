//! Single-file checkpoint archive.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! b"SHINECKP"  u32 version
//! u64 config_len, config JSON bytes
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, ndim x u64 dims, f32 data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

use super::{ModelConfig, ShineModel};

pub const MAGIC: &[u8; 8] = b"SHINECKP";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &ShineModel) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let mut out = Vec::with_capacity(model.count_params() * 4 + config.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors = model.params().tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt("truncated archive"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).map_err(|_| self.corrupt("length overflow"))
    }

    fn corrupt(&self, reason: &str) -> Error {
        Error::CorruptFile {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}

pub fn from_bytes(buf: &[u8], path: &Path) -> Result<ShineModel> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.corrupt(&format!("unsupported format version {version}")));
    }
    let n = r.u64()?;
    let n = r.len(n)?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| r.corrupt(&format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.corrupt("tensor name is not utf-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| r.corrupt("size overflow"))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(name, shape, data);
    }
    if r.pos != buf.len() {
        return Err(r.corrupt("trailing bytes"));
    }
    ShineModel::from_parts(config, params).map_err(|e| r.corrupt(&e.to_string()))
}

pub fn save(model: &ShineModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ShineModel> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, path)
}
