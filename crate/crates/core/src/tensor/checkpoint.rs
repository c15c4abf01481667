//! Flat binary parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`, values little-endian `f64`:
//!
//! ```text
//! "VTF1"
//! repeated until end of file:
//!     name_len, name bytes (UTF-8)
//!     rank, dims[rank]
//!     values[product(dims)]
//! ```

use std::path::Path;

use super::{ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VTF1";

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + params.total_numel() * 8 + params.len() * 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TensorError::Format {
                offset: self.pos,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(TensorError::Format { offset: 0, detail: "bad magic, expected VTF1".into() });
    }
    let mut params = ParamStore::new();
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| TensorError::Format { offset: start + 4, detail: "name is not UTF-8".into() })?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| TensorError::Format { offset: start, detail: format!("tensor {name}: {e}") })?
            .with_grad();
        params.insert(name, tensor);
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
