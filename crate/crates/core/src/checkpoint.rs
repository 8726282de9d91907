//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic `LCVGCKPT`, little-endian `u32` format version,
//! little-endian `u64` metadata length, UTF-8 JSON metadata, then the named
//! tensor blob.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ArchConfig;

pub const MAGIC: &[u8; 8] = b"LCVGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: u8,
    pub iteration: usize,
    pub height: usize,
    pub width: usize,
    pub arch: ArchConfig,
    pub config: TrainConfig,
    pub masknet_hash: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn encode(meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(meta)?;
        let mut blob = Vec::new();
        Tensor::save_multi_to_stream(tensors, &mut blob)?;
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        let start = r.position() as usize;
        let json = bytes
            .get(start..start + len)
            .ok_or_else(|| Error::Checkpoint("truncated metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(json)?;
        let blob = Cursor::new(&bytes[start + len..]);
        let tensors = Tensor::load_multi_from_stream(blob)?.into_iter().collect();
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(path: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<()> {
        let bytes = Checkpoint::encode(meta, tensors)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model the checkpoint was written from.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.meta.arch, self.meta.height, self.meta.width, 0)?;
        model.load_tensors(&self.tensors)?;
        Ok(model)
    }
}

pub fn load_model(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.model()?;
    Ok((model, ckpt.meta))
}
