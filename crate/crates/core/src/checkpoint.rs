//! Single-file checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "SURGSEG\0"
//! version    u32       FORMAT_VERSION
//! header_len u32
//! header     header_len bytes of UTF-8 JSON (model kind + configuration)
//! count      u32       number of tensors
//! count × {
//!     name_len u32, name bytes (UTF-8)
//!     flags    u8      bit 0 = trainable
//!     rows     u32, cols u32
//!     data     rows·cols × f32
//! }
//! ```
//!
//! Tensors are written in store order, so identical stores produce identical
//! bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SURGSEG\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes<H: Serialize>(header: &H, store: &ParamStore) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + store.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
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
}

pub fn from_bytes<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: H = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let flags = r.take(1)?[0];
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        store.add(name, Tensor::from_vec(rows, cols, data)?, flags & 1 == 1)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((header, store))
}

pub fn save<H: Serialize>(path: &Path, header: &H, store: &ParamStore) -> Result<()> {
    let bytes = to_bytes(header, store)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<H: DeserializeOwned>(path: &Path) -> Result<(H, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(reason) => Error::load(path, reason),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Header {
        kind: String,
        rank: usize,
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_vec(2, 3, vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.0]).unwrap(), false).unwrap();
        s.add("a.lora.B", Tensor::zeros(3, 1), true).unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_f32_values_and_flags() {
        let h = Header { kind: "segmenter".into(), rank: 4 };
        let bytes = to_bytes(&h, &store()).unwrap();
        let (h2, s2): (Header, ParamStore) = from_bytes(&bytes).unwrap();
        assert_eq!(h, h2);
        let mut want = store();
        let ids: Vec<_> = want.ids().collect();
        for id in ids {
            want.get_mut(id).round_to_f32();
        }
        assert_eq!(s2, want);
        assert_eq!(to_bytes(&h2, &s2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let h = Header { kind: "x".into(), rank: 1 };
        let bytes = to_bytes(&h, &store()).unwrap();
        assert!(from_bytes::<Header>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<Header>(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(from_bytes::<Header>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes::<Header>(&long).is_err());
    }
}
