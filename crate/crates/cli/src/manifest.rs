//! Run manifests written next to every command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use patchsae_core::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything that varies between otherwise identical runs lives here.
#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub started_unix: u64,
    pub elapsed_seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub run: RunInfo,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn digest_into(map: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            digest_into(map, &e)?;
        }
    } else {
        map.insert(path.display().to_string(), sha256_file(path)?);
    }
    Ok(())
}

/// Collects the pieces of a manifest while a command runs.
pub struct ManifestBuilder {
    command: String,
    started: Instant,
    started_unix: u64,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        ManifestBuilder {
            command: command.to_string(),
            started: Instant::now(),
            started_unix,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    /// Digests inputs and `outputs`, then writes the manifest to `dest`.
    pub fn finish(self, config: impl Serialize, outputs: &[PathBuf], dest: &Path) -> Result<RunManifest> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            digest_into(&mut inputs, p)?;
        }
        let mut outs = BTreeMap::new();
        for p in outputs {
            digest_into(&mut outs, p)?;
        }
        let manifest = RunManifest {
            command: self.command,
            version: TOOLKIT_VERSION.to_string(),
            config: serde_json::to_value(config)?,
            seeds: self.seeds,
            inputs,
            outputs: outs,
            run: RunInfo {
                started_unix: self.started_unix,
                elapsed_seconds: self.started.elapsed().as_secs_f64(),
                threads: rayon::current_num_threads(),
            },
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(dest, bytes)?;
        Ok(manifest)
    }
}

/// `<out>.manifest.json` beside a single-file output.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
