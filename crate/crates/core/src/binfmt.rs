//! Little-endian container shared by the model and embedding files:
//!
//! ```text
//! magic [8] | version u32 | header_len u32 | header (UTF-8 JSON) | f32 payload
//! ```
//!
//! The payload is a flat sequence of f32 values; the header says how to split it.

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub struct Container<H> {
    pub header: H,
    pub payload: Vec<f32>,
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(
    what: &'static str,
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<Container<H>> {
    let mut r = Reader::new(what, bytes);
    r.magic(magic)?;
    r.version()?;
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    let header: H = serde_json::from_slice(json)?;
    let rest = r.rest();
    if rest.len() % 4 != 0 {
        return Err(Error::format(what, "payload length is not a multiple of 4"));
    }
    let payload = f32s(rest);
    Ok(Container { header, payload })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Splits a flat payload into consecutive pieces of the given lengths.
pub(crate) fn split<'a>(
    what: &'static str,
    payload: &'a [f32],
    lens: &[usize],
) -> Result<Vec<&'a [f32]>> {
    let total = lens
        .iter()
        .try_fold(0usize, |acc, &l| acc.checked_add(l))
        .ok_or_else(|| Error::format(what, "declared sizes overflow"))?;
    if total != payload.len() {
        return Err(Error::format(
            what,
            format!("payload has {} values, header declares {}", payload.len(), total),
        ));
    }
    let mut out = Vec::with_capacity(lens.len());
    let mut off = 0;
    for &l in lens {
        out.push(&payload[off..off + l]);
        off += l;
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(what: &'static str, bytes: &'a [u8]) -> Self {
        Self {
            what,
            bytes,
            pos: 0,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.what, "unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    pub fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::format(self.what, format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}
