//! Flat checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ODRCKPT1" | u32 entry count | entries...
//! entry: u32 name length | name (UTF-8) | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
//! ```
//!
//! A JSON manifest sits next to the archive at `<archive>.manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{Init, ParameterStore};
use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ODRCKPT1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
}

pub fn manifest_path(archive: &Path) -> PathBuf {
    let mut s = archive.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, e) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::invalid("truncated checkpoint"));
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

pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::invalid("not a checkpoint archive"));
    }
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::invalid("parameter name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        store.insert(&name, Tensor::new(shape, data)?, Init::Zeros);
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes after checkpoint entries"));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParameterStore, manifest: &CheckpointManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))?;
    let mp = manifest_path(path);
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterStore, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let store = decode(&bytes).map_err(|e| Error::data(path, e.to_string()))?;
    let mp = manifest_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest = serde_json::from_str(&text)?;
    Ok((store, manifest))
}
