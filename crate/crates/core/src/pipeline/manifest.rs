//! Run manifests: what a command read, wrote, and how long it took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the command, configuration, seeds and input hashes.
    pub run_id: String,
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Path to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Stage name to seconds.
    pub timings: BTreeMap<String, f64>,
}

pub struct RunRecorder {
    manifest: RunManifest,
    started: Option<(String, Instant)>,
}

impl RunRecorder {
    pub fn new(command: &str, config: Value) -> Self {
        RunRecorder {
            manifest: RunManifest {
                run_id: String::new(),
                command: command.to_string(),
                config,
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                timings: BTreeMap::new(),
            },
            started: None,
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_string(), seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Record every file under `path` (or the file itself).
    pub fn output(&mut self, path: &Path) -> Result<()> {
        for f in files_under(path)? {
            let h = sha256_file(&f)?;
            self.manifest.outputs.insert(f.display().to_string(), h);
        }
        Ok(())
    }

    pub fn start(&mut self, stage: &str) {
        self.stop();
        self.started = Some((stage.to_string(), Instant::now()));
    }

    pub fn stop(&mut self) {
        if let Some((s, t)) = self.started.take() {
            *self.manifest.timings.entry(s).or_insert(0.0) += t.elapsed().as_secs_f64();
        }
    }

    pub fn finish(mut self, path: &Path) -> Result<RunManifest> {
        self.stop();
        let m = &mut self.manifest;
        let key = serde_json::to_vec(&(&m.command, &m.config, &m.seeds, &m.inputs))?;
        m.run_id = sha256_bytes(&key)[..16].to_string();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(path, e))?;
        Ok(self.manifest)
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("run manifest", e.to_string()))
    }
}

/// Sorted list of files below `path`.
pub fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
