//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FSR1" | version u32 | net-config digest [32] | step u64
//! meta_len u32 | meta (JSON)
//! blob_count u32 | blob*
//! sha256 of every preceding byte [32]
//!
//! blob = name_len u16 | name | ndim u8 | dim u32 * ndim | f32 * product(dims)
//! ```

use std::io::Write;
use std::path::Path;

use ndgrad::Tensor;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSR1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("network configuration digest differs from the requested configuration")]
    DigestMismatch,
    #[error("integrity checksum mismatch")]
    ChecksumMismatch,
    #[error("file truncated")]
    Truncated,
    #[error("malformed: {0}")]
    Malformed(String),
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub step: u64,
    pub meta: serde_json::Value,
    pub blobs: Vec<(String, Tensor<f32>)>,
}

/// SHA-256 of the canonical JSON form of a configuration value.
pub fn config_digest<C: Serialize>(cfg: &C) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("serializable config");
    Sha256::digest(json).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn blob(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> std::result::Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.blobs.len())?.to_le_bytes());
        for (name, t) in &self.blobs {
            let name_len = u16::try_from(name.len()).map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.shape().len()).map_err(|_| CheckpointError::Malformed("rank > 255".into()))?;
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        Ok(out)
    }

    /// Decodes and verifies; when `expected_digest` is given the stored
    /// configuration digest must equal it.
    pub fn decode(bytes: &[u8], expected_digest: Option<&[u8; 32]>) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 32 + 4 {
            return Err(CheckpointError::Truncated);
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            // a short file fails here too; report the more specific cause
            // when the header itself cannot be read
            return Err(if body.len() < 4 + 4 + 32 + 8 {
                CheckpointError::Truncated
            } else {
                CheckpointError::ChecksumMismatch
            });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        if expected_digest.is_some_and(|d| d != &digest) {
            return Err(CheckpointError::DigestMismatch);
        }
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            blobs.push((name, t));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self { digest, step, meta, blobs })
    }
}

fn len_u32(n: usize) -> std::result::Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::Malformed(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.encode().map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, &bytes)
}

pub fn load(path: &Path, expected_digest: Option<&[u8; 32]>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, expected_digest).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}
