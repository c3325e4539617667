//! Run manifests and content hashes. Every output directory carries the
//! manifest that produced it, with hashes of the inputs read and the outputs
//! written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ftm_core::{FtmError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Fully resolved configuration.
    pub config: RunConfig,
    pub seed: u64,
    /// Command options not covered by the config, e.g. summary kind or
    /// operating point.
    pub options: BTreeMap<String, String>,
    /// Input role to path.
    pub inputs: BTreeMap<String, PathBuf>,
    pub input_hash: String,
    /// Output files, relative to the output directory.
    pub outputs: Vec<String>,
    pub output_hash: String,
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            options: BTreeMap::new(),
            inputs: BTreeMap::new(),
            input_hash: String::new(),
            outputs: Vec::new(),
            output_hash: String::new(),
        }
    }

    pub fn option(mut self, key: &str, value: impl ToString) -> Self {
        self.options.insert(key.to_string(), value.to_string());
        self
    }

    /// Records an input and refreshes the input hash.
    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        let abs = path
            .canonicalize()
            .map_err(|e| FtmError::Data(format!("{}: {e}", path.display())))?;
        self.inputs.insert(role.to_string(), abs);
        self.input_hash = hash_inputs(&self.inputs)?;
        Ok(self)
    }

    /// Hashes every file under `out` except the manifest itself, then
    /// writes the manifest there.
    pub fn finish(mut self, out: &Path) -> Result<Self> {
        self.outputs = list_files(out)?;
        self.output_hash = tree_hash(out, &self.outputs)?;
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(out.join(RUN_MANIFEST), text + "\n")?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FtmError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| FtmError::Format(format!("{}: {e}", path.display())))
    }

    /// Errors when an input changed since the manifest was written.
    pub fn check_inputs(&self) -> Result<()> {
        let now = hash_inputs(&self.inputs)?;
        if now != self.input_hash {
            return Err(FtmError::Data(format!(
                "inputs changed since the manifest was written ({} vs {})",
                self.input_hash, now
            )));
        }
        Ok(())
    }
}

/// Hash of a byte string as a git blob.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash over `(blob hash, path)` lines of the given files under `root`.
pub fn tree_hash(root: &Path, files: &[String]) -> Result<String> {
    let mut h = Sha256::new();
    for rel in files {
        let bytes = std::fs::read(root.join(rel))?;
        h.update(format!("{} {rel}\n", blob_hash(&bytes)).as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Files under `root`, relative and sorted, excluding run manifests.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| FtmError::Data(e.to_string()))?;
        if !entry.file_type().is_file() || entry.file_name() == RUN_MANIFEST {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        out.push(rel.to_string_lossy().replace('\\', "/"));
    }
    out.sort();
    Ok(out)
}

/// Hash of a file, or of the tree under a directory.
pub fn path_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        tree_hash(path, &list_files(path)?)
    } else {
        Ok(blob_hash(&std::fs::read(path).map_err(|e| {
            FtmError::Data(format!("{}: {e}", path.display()))
        })?))
    }
}

fn hash_inputs(inputs: &BTreeMap<String, PathBuf>) -> Result<String> {
    let mut h = Sha256::new();
    for (role, path) in inputs {
        h.update(format!("{} {role}\n", path_hash(path)?).as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Creates `out`, refusing a non-empty existing directory unless `force`.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(FtmError::Config(format!("{} exists and is not a directory", out.display())));
        }
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(FtmError::Config(format!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}
