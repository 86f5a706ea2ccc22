//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "VRTSCKPT"
//! version  u32
//! arch     u64 length + UTF-8 JSON architecture descriptor (empty if none)
//! count    u64
//! per tensor:
//!   name   u32 length + UTF-8
//!   frozen u8
//!   ndim   u32, dims u64 x ndim
//!   data   f64 x prod(dims)
//! ```

use std::fs;
use std::path::Path;

use super::Architecture;
use crate::error::{Error, Result};
use crate::numeric::{ParameterStore, Tensor};

const MAGIC: &[u8; 8] = b"VRTSCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn checkpoint_to_bytes(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * store.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let arch = store
        .architecture
        .as_ref()
        .map(|a| serde_json::to_string(a).expect("architecture serializes"))
        .unwrap_or_default();
    out.extend_from_slice(&(arch.len() as u64).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.frozen as u8);
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide {
            self.u64()?
        } else {
            self.u32()? as u64
        };
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("checkpoint length field {n} is out of range")))
    }

    fn string(&mut self, wide: bool) -> Result<&'a str> {
        let n = self.len(wide)?;
        std::str::from_utf8(self.take(n)?)
            .map_err(|e| Error::Data(format!("checkpoint text is not UTF-8: {e}")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mut store = ParameterStore::new();
    let arch = r.string(true)?;
    if !arch.is_empty() {
        let a: Architecture = serde_json::from_str(arch)
            .map_err(|e| Error::Data(format!("bad architecture descriptor: {e}")))?;
        store.architecture = Some(a);
    }
    let count = r.len(true)?;
    for _ in 0..count {
        let name = r.string(false)?.to_owned();
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Data(format!(
                    "tensor `{name}`: bad frozen flag {other}"
                )))
            }
        };
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Data(format!(
                "tensor `{name}`: unsupported rank {ndim}"
            )));
        }
        let dims = (0..ndim).map(|_| r.len(true)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| Error::Data(format!("tensor `{name}`: shape {dims:?} is too large")))?;
        let raw = r.take(8 * n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor =
            Tensor::new(dims, data).map_err(|e| Error::Data(format!("tensor `{name}`: {e}")))?;
        store.insert_param(name, tensor, frozen)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
