//! Binary checkpoints: magic, JSON header length, JSON header, then every
//! tensor as row-major little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::model::{Buffers, Model};

const MAGIC: &[u8; 8] = b"PMLPCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    buffers: Buffers,
    entries: Vec<Entry>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub buffers: Buffers,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Every parameter of `model`, or only the non-temporal ones for an
    /// image-mode checkpoint.
    pub fn from_model(model: &Model, image_only: bool) -> Self {
        let tensors = model
            .params
            .iter()
            .filter(|(spec, _)| !(image_only && spec.temporal))
            .map(|(spec, t)| (spec.name.clone(), t.clone()))
            .collect();
        Self { config: model.config.clone(), buffers: model.buffers.clone(), tensors }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset: payload.len() });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            buffers: self.buffers.clone(),
            entries,
        })?;
        let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&payload);
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + 8 * n)
                .ok_or_else(|| bad(&format!("truncated payload for `{}`", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(Self { config: header.config, buffers: header.buffers, tensors })
    }
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self, false).save(path)
    }

    /// Saves only the parameters an image-mode forward uses.
    pub fn save_image_mode(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self, true).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut model = Model::new(ckpt.config.clone(), 0)?;
        model.load_checkpoint(&ckpt, false)?;
        Ok(model)
    }

    /// Copies matching tensors in, verifying shapes. Unknown names are
    /// rejected; with `allow_missing`, parameters absent from the checkpoint
    /// keep their current values. Nothing changes unless every check passes.
    /// Returns the names left untouched.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, allow_missing: bool) -> Result<Vec<String>> {
        for name in ckpt.tensors.keys() {
            if self.params.position(name).is_err() {
                return Err(Error::Checkpoint(format!("unexpected parameter `{name}`")));
            }
        }
        let mut missing = Vec::new();
        for spec in self.params.specs() {
            match ckpt.tensors.get(&spec.name) {
                Some(t) if t.shape() != spec.shape => {
                    return Err(Error::Checkpoint(format!(
                        "`{}` has shape {:?}, model expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )));
                }
                Some(_) => {}
                None if allow_missing => missing.push(spec.name.clone()),
                None => return Err(Error::Checkpoint(format!("missing parameter `{}`", spec.name))),
            }
        }
        for (name, stats) in &ckpt.buffers {
            if self.buffers.get(name).is_some_and(|mine| mine.mean.len() != stats.mean.len()) {
                return Err(Error::Checkpoint(format!("buffer `{name}` width mismatch")));
            }
        }
        for (name, t) in &ckpt.tensors {
            self.params.set(name, t.clone())?;
        }
        for (name, stats) in &ckpt.buffers {
            if let Some(mine) = self.buffers.get_mut(name) {
                *mine = stats.clone();
            }
        }
        Ok(missing)
    }
}
