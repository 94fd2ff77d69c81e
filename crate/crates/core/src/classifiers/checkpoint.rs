//! Binary checkpoint container.
//!
//! Layout: magic `ATTRCKPT`, `u32` format version, `u32` header length,
//! canonical JSON header (sorted keys), `u64` parameter count, then the
//! parameters in little-endian order at the precision named in the header.

use std::path::Path;

use super::scalar::{Precision, Real};
use super::{ModelCheckpoint, Params};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ATTRCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn header_json(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(ckpt.header())?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("precision".into(), serde_json::to_value(ckpt.params.precision())?);
    }
    // serde_json maps are ordered by key, so this is canonical.
    Ok(serde_json::to_vec(&value)?)
}

pub fn to_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let header = header_json(ckpt)?;
    let mut out = Vec::with_capacity(24 + header.len() + ckpt.params.len() * ckpt.params.precision().bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    match &ckpt.params {
        Params::F32(p) => p.iter().for_each(|v| v.write_le(&mut out)),
        Params::F64(p) => p.iter().for_each(|v| v.write_le(&mut out)),
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn read_params<T: Real>(c: &mut Cursor<'_>, n: usize) -> Result<Vec<T>> {
    let w = T::PRECISION.bytes();
    let bytes = c.take(n.checked_mul(w).ok_or_else(|| Error::Checkpoint("parameter count overflow".into()))?, "parameters")?;
    Ok(bytes.chunks_exact(w).map(T::read_le).collect())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u32::from_le_bytes(c.take(4, "header length")?.try_into().unwrap()) as usize;
    let mut value: serde_json::Value = serde_json::from_slice(c.take(hlen, "header")?)?;
    let precision: Precision = match value.as_object_mut().and_then(|m| m.remove("precision")) {
        Some(p) => serde_json::from_value(p)?,
        None => return Err(Error::Checkpoint("header lacks precision".into())),
    };
    let header: super::CheckpointHeader = serde_json::from_value(value)?;
    let n = u64::from_le_bytes(c.take(8, "parameter count")?.try_into().unwrap()) as usize;
    let params = match precision {
        Precision::Single => Params::F32(read_params(&mut c, n)?),
        Precision::Double => Params::F64(read_params(&mut c, n)?),
    };
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    ModelCheckpoint::from_parts(header, params)
}

pub fn save(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, to_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelCheckpoint> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
