//! Model checkpoints: named weight blobs plus the configuration snapshot,
//! training history and constants needed to rebuild and use a model.
//!
//! File layout: `"DSCKPT1\n"`, u64 little-endian header length, JSON header,
//! then every tensor's `f64` values little-endian in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DSCKPT1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `autoencoder`, `denoiser`, `controlnet`.
    pub kind: String,
    pub config: Value,
    pub weights: Vec<(String, Tensor)>,
    /// Named per-epoch series (losses, validation metrics).
    pub history: BTreeMap<String, Vec<f64>>,
    /// Scalars needed at inference time (latent scale, schedule bounds).
    pub constants: BTreeMap<String, f64>,
    /// Content hashes of checkpoints this one was trained against.
    pub references: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    history: BTreeMap<String, Vec<f64>>,
    constants: BTreeMap<String, f64>,
    references: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    content_hash: String,
}

impl Checkpoint {
    pub fn new(kind: &str, config: Value, store: &ParamStore) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            config,
            weights: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            history: BTreeMap::new(),
            constants: BTreeMap::new(),
            references: BTreeMap::new(),
        }
    }

    /// SHA-256 over kind, config, constants, references and weights. The
    /// training history is deliberately not part of model identity.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.as_bytes());
        h.update(self.config.to_string().as_bytes());
        for (k, v) in &self.constants {
            h.update(k.as_bytes());
            h.update(v.to_le_bytes());
        }
        for (k, v) in &self.references {
            h.update(k.as_bytes());
            h.update(v.as_bytes());
        }
        for (name, t) in &self.weights {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn constant(&self, key: &str) -> Result<f64> {
        self.constants
            .get(key)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks constant `{key}`", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        store.load_named(self.weights.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad {} config: {e}", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            history: self.history.clone(),
            constants: self.constants.clone(),
            references: self.references.clone(),
            tensors: self
                .weights
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            content_hash: self.content_hash(),
        };
        let hbytes = serde_json::to_vec(&header)?;
        let n: usize = self.weights.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(16 + hbytes.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hbytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&hbytes);
        for (_, t) in &self.weights {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut payload = &body[hlen..];
        let mut weights = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(bad("truncated checkpoint payload"));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[8 * n..];
            weights.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after checkpoint payload"));
        }
        let ckpt = Checkpoint {
            kind: header.kind,
            config: header.config,
            weights,
            history: header.history,
            constants: header.constants,
            references: header.references,
        };
        if ckpt.content_hash() != header.content_hash {
            return Err(bad("content hash mismatch"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
