//! Binary container for named `f64` tensors plus a JSON metadata block.
//!
//! ```text
//! magic     8 bytes   "TVCKPT01"
//! meta_len  u32 LE    followed by meta_len bytes of UTF-8 JSON
//! count     u32 LE
//! entry*    u16 LE name_len, name bytes, u8 ndim, ndim × u64 LE dims,
//!           prod(dims) × f64 LE values
//! digest    32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Entries are stored in strictly increasing name order, so a given set of
//! tensors has exactly one encoding.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TVCKPT01";
const MAX_META: usize = 16 << 20;
const MAX_NDIM: usize = 8;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON text, stored verbatim.
    pub metadata: String,
    pub tensors: Params,
}

impl Checkpoint {
    pub fn new<M: Serialize>(metadata: &M, tensors: Params) -> Result<Self> {
        let metadata = serde_json::to_string(metadata).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn metadata_as<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_str(&self.metadata).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = self.metadata.as_bytes();
        if meta.len() > MAX_META {
            return Err(Error::Checkpoint("metadata block too large".into()));
        }
        let mut out = Vec::with_capacity(16 + meta.len() + self.tensors.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.shape().len() > MAX_NDIM {
                return Err(Error::Checkpoint(format!("entry `{name}` cannot be encoded")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if &body[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("digest mismatch (file corrupted or truncated)".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let meta_len = r.u32()? as usize;
        if meta_len > MAX_META {
            return Err(Error::Checkpoint("metadata block too large".into()));
        }
        let metadata = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?
            .to_owned();
        let count = r.u32()? as usize;
        let mut tensors = Params::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_owned();
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::Checkpoint(format!("entry `{name}` out of order or duplicated")));
            }
            let ndim = r.u8()? as usize;
            if ndim > MAX_NDIM {
                return Err(Error::Checkpoint(format!("entry `{name}` has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` size overflows")))?;
                shape.push(d);
            }
            let nbytes = numel
                .checked_mul(8)
                .filter(|&n| n <= r.remaining())
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` runs past end of file")))?;
            let data = r
                .take(nbytes)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name.clone(), Tensor::new(shape, data));
            prev = Some(name);
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
}
