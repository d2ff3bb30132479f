//! Learned concept vectors and their compact binary file.
//!
//! Layout (little-endian): `b"DFE1"` | `u16` version | `u16` name length +
//! UTF-8 name | `u32` dimension | `d × f32` | `u32` metadata length + UTF-8
//! JSON | CRC-32 of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 4] = b"DFE1";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMetadata {
    /// Surface the references came from.
    pub domain: String,
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub init_word: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding {
    pub token: String,
    pub vector: Vec<f32>,
    pub metadata: EmbeddingMetadata,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        ensure!(
            self.pos + n <= self.bytes.len(),
            Error::format(field, "file truncated")
        );
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl ConceptEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        ensure!(
            self.token.len() <= u16::MAX as usize,
            Error::Parameter("token name too long".into())
        );
        ensure!(
            self.vector.iter().all(|v| v.is_finite()),
            Error::Parameter("embedding vector has non-finite values".into())
        );
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(20 + self.token.len() + 4 * self.vector.len() + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.token.len() as u16).to_le_bytes());
        out.extend_from_slice(self.token.as_bytes());
        out.extend_from_slice(&(self.vector.len() as u32).to_le_bytes());
        for v in &self.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4, "magic")? == MAGIC, Error::format("magic", "not an embedding file"));
        let version = r.u16("version")?;
        ensure!(
            version == VERSION,
            Error::format("version", format!("unsupported version {version}"))
        );
        ensure!(bytes.len() >= 10, Error::format("checksum", "file truncated"));
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        ensure!(
            crc32fast::hash(body) == stored,
            Error::format("checksum", "CRC-32 mismatch")
        );
        let mut r = Reader { bytes: body, pos: r.pos };
        let nlen = r.u16("token name length")? as usize;
        let token = std::str::from_utf8(r.take(nlen, "token name")?)
            .map_err(|e| Error::format("token name", e.to_string()))?
            .to_string();
        let d = r.u32("dimension")? as usize;
        ensure!(d > 0, Error::format("dimension", "zero-length vector"));
        let raw = r.take(d.checked_mul(4).ok_or_else(|| Error::format("dimension", "overflow"))?, "vector")?;
        let vector: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ensure!(
            vector.iter().all(|v| v.is_finite()),
            Error::format("vector", "non-finite value")
        );
        let mlen = r.u32("metadata length")? as usize;
        let metadata: EmbeddingMetadata = serde_json::from_slice(r.take(mlen, "metadata")?)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        ensure!(r.pos == body.len(), Error::format("metadata", "trailing bytes"));
        Ok(ConceptEmbedding {
            token,
            vector,
            metadata,
        })
    }
}

pub fn save_embedding(e: &ConceptEmbedding, path: &Path) -> Result<()> {
    std::fs::write(path, e.to_bytes()?).map_err(|err| Error::io(path, err))
}

pub fn load_embedding(path: &Path) -> Result<ConceptEmbedding> {
    let bytes = std::fs::read(path).map_err(|err| Error::io(path, err))?;
    ConceptEmbedding::from_bytes(&bytes)
}
