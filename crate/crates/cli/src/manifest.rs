//! Run manifests: the command line, a config snapshot and content hashes of
//! every input, written beside the outputs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub args: Vec<String>,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    /// Hash over the input hashes, in order.
    pub input_hash: String,
}

fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path, h: &mut Sha256) -> Result<()> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}

fn hash_tree(root: &Path, dir: &Path, h: &mut Sha256) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.file_name().is_some_and(|n| n == MANIFEST_FILE) {
            continue;
        }
        if p.is_dir() {
            hash_tree(root, &p, h)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            hash_file(&p, h)?;
        }
    }
    Ok(())
}

/// Content hash of a file, or of every file under a directory with its
/// relative path.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        hash_tree(path, path, &mut h)?;
    } else {
        hash_file(path, &mut h)?;
    }
    Ok(hex(&h.finalize()))
}

impl RunManifest {
    pub fn new() -> Result<Self> {
        Ok(RunManifest {
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            input_hash: String::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let sha256 = content_hash(path)?;
        self.inputs.push(InputHash { path: path.to_path_buf(), sha256 });
        let mut h = Sha256::new();
        for i in &self.inputs {
            h.update(i.sha256.as_bytes());
        }
        self.input_hash = hex(&h.finalize());
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
