//! Run manifests: every command writes its argv, seed, input digests and
//! output inventory next to its outputs, so a run can be reproduced
//! bit-identically from the manifest alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Full argv after the program name.
    pub command: Vec<String>,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    /// sha256 digest per input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_time_ms: u64,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Output directory handle that records every file written under it.
pub struct OutDir {
    dir: PathBuf,
    started: Instant,
    command: Vec<String>,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path, command: Vec<String>, seed: u64) -> std::io::Result<OutDir> {
        fs::create_dir_all(dir)?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            started: Instant::now(),
            command,
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn record_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Register (and create parents for) an output file path.
    pub fn path(&mut self, name: &str) -> std::io::Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.outputs.push(name.to_string());
        Ok(p)
    }

    /// Write the manifest; call once, last.
    pub fn finish(mut self) -> std::io::Result<()> {
        self.outputs.push("manifest.json".into());
        self.outputs.sort();
        let mut versions = BTreeMap::new();
        versions.insert("pce-core".to_string(), pce_core::VERSION.to_string());
        versions.insert("pce-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        let manifest = RunManifest {
            command: self.command,
            seed: self.seed,
            versions,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_ms: self.started.elapsed().as_millis() as u64,
        };
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.dir.join("manifest.json"), body + "\n")
    }
}

pub fn read_manifest(path: &Path) -> std::io::Result<RunManifest> {
    let body = fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
