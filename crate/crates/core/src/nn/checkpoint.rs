//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPKINVCK"
//! version    u32
//! config     u32 length + UTF-8 JSON of the NetConfig
//! count      u32
//! per tensor:
//!   name     u32 length + UTF-8
//!   kind     u8 (1 = trainable parameter, 0 = buffer)
//!   ndim     u32, then ndim x u32 dims
//!   data     row-major f32
//! ```

use std::path::Path;

use crate::error::{Error, Result};

use super::{NetConfig, Network, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"SPKINVCK";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(net: &Network<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&net.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_bytes(&mut out, &cfg);
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in net.params.entries() {
        put_bytes(&mut out, p.name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.tensor.shape.len() as u32).to_le_bytes());
        for &d in &p.tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.tensor.data {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Network<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config: NetConfig =
        serde_json::from_slice(c.string()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = c.u32()? as usize;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let name = String::from_utf8(c.string()?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let trainable = c.take(1)?[0] != 0;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        store.add(&name, Tensor::from_vec(&shape, data)?, trainable)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Network::from_store(config, store)
}

pub fn save<T: Real>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
