//! Single-file model container.
//!
//! Layout: `b"DFCK"`, `u16` version, `u32` manifest length, UTF-8 JSON
//! manifest, then each parameter block as little-endian `f32`, then a CRC-32
//! of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autoencoder::{Autoencoder, PatchAutoencoder, PatchAutoencoderConfig};
use super::denoiser::{Denoiser, DenoiserConfig};
use super::schedule::ScheduleConfig;
use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 4] = b"DFCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub training_seed: u64,
    pub dataset_fingerprint: String,
    pub autoencoder: Option<PatchAutoencoderConfig>,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: ScheduleConfig,
    pub autoencoder: Autoencoder,
    pub training_seed: u64,
    pub dataset_fingerprint: String,
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, field: &str) -> Result<&'a [u8]> {
    ensure!(
        *pos + n <= bytes.len(),
        Error::format(field, "file truncated")
    );
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_f32s(bytes: &[u8], pos: &mut usize, n: usize, field: &str) -> Result<Vec<f32>> {
    let raw = take(bytes, pos, n * 4, field)?;
    let v: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ensure!(
        v.iter().all(|x| x.is_finite()),
        Error::format(field, "non-finite parameter value")
    );
    Ok(v)
}

impl Checkpoint {
    pub fn manifest(&self) -> CheckpointManifest {
        let mut blocks = vec![BlockInfo {
            name: "denoiser".into(),
            len: self.model.params().len(),
        }];
        let ae = match &self.autoencoder {
            Autoencoder::Identity => None,
            Autoencoder::Learned(a) => {
                blocks.push(BlockInfo {
                    name: "autoencoder".into(),
                    len: a.params().len(),
                });
                Some(a.config().clone())
            }
        };
        CheckpointManifest {
            denoiser: self.model.config().clone(),
            schedule: self.schedule.clone(),
            training_seed: self.training_seed,
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            autoencoder: ae,
            blocks,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for p in self.model.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        if let Autoencoder::Learned(a) = &self.autoencoder {
            for p in a.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        ensure!(take(bytes, &mut pos, 4, "magic")? == MAGIC, Error::format("magic", "not a checkpoint file"));
        let v = take(bytes, &mut pos, 2, "version")?;
        let version = u16::from_le_bytes([v[0], v[1]]);
        ensure!(
            version == VERSION,
            Error::format("version", format!("unsupported version {version}"))
        );
        ensure!(bytes.len() >= pos + 8, Error::format("checksum", "file truncated"));
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        ensure!(
            crc32fast::hash(body) == stored,
            Error::format("checksum", "CRC-32 mismatch")
        );
        let l = take(body, &mut pos, 4, "manifest length")?;
        let mlen = u32::from_le_bytes([l[0], l[1], l[2], l[3]]) as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(take(body, &mut pos, mlen, "manifest")?)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        let dblock = manifest
            .blocks
            .iter()
            .find(|b| b.name == "denoiser")
            .ok_or_else(|| Error::format("manifest", "missing denoiser block"))?;
        let dparams = read_f32s(body, &mut pos, dblock.len, "denoiser block")?;
        let model = Denoiser::from_params(manifest.denoiser.clone(), dparams)
            .map_err(|e| Error::format("denoiser block", e.to_string()))?;
        let autoencoder = match &manifest.autoencoder {
            None => Autoencoder::Identity,
            Some(cfg) => {
                let b = manifest
                    .blocks
                    .iter()
                    .find(|b| b.name == "autoencoder")
                    .ok_or_else(|| Error::format("manifest", "missing autoencoder block"))?;
                let p = read_f32s(body, &mut pos, b.len, "autoencoder block")?;
                Autoencoder::Learned(
                    PatchAutoencoder::from_params(cfg.clone(), p)
                        .map_err(|e| Error::format("autoencoder block", e.to_string()))?,
                )
            }
        };
        ensure!(pos == body.len(), Error::format("blocks", "trailing bytes after parameter blocks"));
        Ok(Checkpoint {
            model,
            schedule: manifest.schedule,
            autoencoder,
            training_seed: manifest.training_seed,
            dataset_fingerprint: manifest.dataset_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
