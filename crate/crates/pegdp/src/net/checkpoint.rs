//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PGDPCKP1"
//! meta     u32 length + UTF-8 `key=value` lines (one per line)
//! table    u32 count + { u16 name_len, name, u64 offset, u64 len }
//! params   u64 count + count * f64
//! blobs    u32 count + { u16 name_len, name, u64 byte_len, bytes }
//! ```
//!
//! The metadata always carries `config_hash`, the SHA-256 of the canonical
//! model-config string, so a checkpoint refuses to load into a mismatched
//! architecture. Extra blobs hold policy-level sidecars (normalization
//! stats are in the metadata; the frozen goal patch is a blob).

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::params::{ParamStore, Segment};

const MAGIC: &[u8; 8] = b"PGDPCKP1";

/// SHA-256 hex digest of a canonical config string.
pub fn config_hash(canonical: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
    pub blobs: Vec<(String, Vec<u8>)>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_checkpoint(
    path: &Path,
    meta: &BTreeMap<String, String>,
    params: &ParamStore,
    blobs: &[(String, Vec<u8>)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);

    let mut meta_text = String::new();
    for (k, v) in meta {
        assert!(!k.contains('\n') && !v.contains('\n'), "metadata must be single-line");
        meta_text.push_str(k);
        meta_text.push('=');
        meta_text.push_str(v);
        meta_text.push('\n');
    }
    buf.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_text.as_bytes());

    buf.extend_from_slice(&(params.segments().len() as u32).to_le_bytes());
    for seg in params.segments() {
        buf.extend_from_slice(&(seg.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(seg.name.as_bytes());
        buf.extend_from_slice(&(seg.offset as u64).to_le_bytes());
        buf.extend_from_slice(&(seg.len as u64).to_le_bytes());
    }

    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, bytes) in blobs {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(bytes);
    }

    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    inner: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.inner.len() {
            return Err(format_err(self.path, "truncated file"));
        }
        let s = &self.inner[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| format_err(self.path, "invalid UTF-8"))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path)?;
    let mut r = Reader {
        path,
        inner: &data,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(format_err(path, "bad magic"));
    }

    let meta_len = r.u32()? as usize;
    let meta_text = r.string(meta_len)?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }

    let n_segments = r.u32()? as usize;
    let mut segments = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        segments.push(Segment { name, offset, len });
    }

    let count = r.u64()? as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
    }
    let params = ParamStore::from_parts(values, segments)
        .map_err(|e| format_err(path, format!("inconsistent table: {e}")))?;

    let n_blobs = r.u32()? as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let byte_len = r.u64()? as usize;
        blobs.push((name, r.take(byte_len)?.to_vec()));
    }

    Ok(Checkpoint {
        meta,
        params,
        blobs,
    })
}

/// Parse an `f64` out of checkpoint metadata.
pub fn meta_f64(meta: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<f64> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format_err(path, format!("missing or invalid {key}")))
}

/// Parse a `usize` out of checkpoint metadata.
pub fn meta_usize(meta: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format_err(path, format!("missing or invalid {key}")))
}
