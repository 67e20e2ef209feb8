//! Versioned binary checkpoint.
//!
//! Layout (little endian):
//!
//! ```text
//! magic        8 bytes  "SAINCKPT"
//! version      u32
//! model tag    u8       1 = sain, 2 = biasedmf
//! header       u64 length + JSON (manifest, fingerprint, vocabularies,
//!              feature tables, batch-norm stats, optimizer counters)
//! tensors      u32 count, then per tensor:
//!              u32 name length, name, u64 rows, u64 cols, rows*cols f64
//! footer       32-byte SHA-256 of everything above
//! ```
//!
//! Parameters come first in `Model::tensors` order, followed by the Adam
//! first and second moments of each (`adam.m.<name>`, `adam.v.<name>`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{FeatureTables, FeatureVocab, IdVocab};
use crate::manifest::RunManifest;
use crate::model::{BatchNormStats, ModelShape};
use crate::tensor::{AdamState, Matrix};
use crate::train::{Model, ModelKind};

const MAGIC: &[u8; 8] = b"SAINCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: checkpoint is corrupted or was modified")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct AdamCounters {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: RunManifest,
    fingerprint: String,
    best_epoch: usize,
    users: IdVocab,
    items: IdVocab,
    vocab: FeatureVocab,
    features: FeatureTables,
    global_mean: Option<f64>,
    batch_norm: Option<BatchNormStats>,
    adam: Vec<AdamCounters>,
}

/// A trained model together with everything needed to reproduce and
/// evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved run manifest; its model config is the one the model uses.
    pub manifest: RunManifest,
    /// Fingerprint of the dataset the model was trained on.
    pub fingerprint: String,
    pub best_epoch: usize,
    pub users: IdVocab,
    pub items: IdVocab,
    pub vocab: FeatureVocab,
    pub features: FeatureTables,
    pub model: Model,
    /// Optimizer state aligned with `model.tensors()`.
    pub adam: Vec<AdamState>,
}

fn tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Sain => 1,
        ModelKind::Biasedmf => 2,
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((m.rows() as u64).to_le_bytes());
    out.extend((m.cols() as u64).to_le_bytes());
    for v in m.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Matrix), CheckpointError> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} too large")))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok((name, m))
    }
}

impl Checkpoint {
    pub fn shape(&self) -> ModelShape {
        ModelShape::from_vocab(&self.vocab, self.users.len(), self.items.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (global_mean, batch_norm) = match &self.model {
            Model::Sain { bn, .. } => (None, Some(bn.clone())),
            Model::Biasedmf { params } => (Some(params.global_mean), None),
        };
        let header = Header {
            manifest: self.manifest.clone(),
            fingerprint: self.fingerprint.clone(),
            best_epoch: self.best_epoch,
            users: self.users.clone(),
            items: self.items.clone(),
            vocab: self.vocab.clone(),
            features: self.features.clone(),
            global_mean,
            batch_norm,
            adam: self
                .adam
                .iter()
                .map(|s| AdamCounters {
                    t: s.t,
                    beta1: s.beta1,
                    beta2: s.beta2,
                    eps: s.eps,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.push(tag(self.model.kind()));
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(&json);

        let tensors = self.model.tensors();
        out.extend(((tensors.len() * 3) as u32).to_le_bytes());
        for (name, m) in &tensors {
            put_tensor(&mut out, name, m);
        }
        for ((name, _), s) in tensors.iter().zip(&self.adam) {
            put_tensor(&mut out, &format!("adam.m.{name}"), &s.m);
            put_tensor(&mut out, &format!("adam.v.{name}"), &s.v);
        }
        let digest = Sha256::digest(&out);
        out.extend(digest.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 32 {
            return Err(CheckpointError::Malformed("truncated".into()));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != footer {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = match r.take(1)?[0] {
            1 => ModelKind::Sain,
            2 => ModelKind::Biasedmf,
            t => return Err(CheckpointError::Malformed(format!("unknown model tag {t}"))),
        };
        let header_len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if header.manifest.model != kind {
            return Err(CheckpointError::Malformed("model tag disagrees with manifest".into()));
        }

        let shape = ModelShape::from_vocab(&header.vocab, header.users.len(), header.items.len());
        let config = &header.manifest.model_config;
        let mut model = Model::init(kind, &shape, config, header.global_mean.unwrap_or(0.0), 0)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        match (&mut model, header.batch_norm) {
            (Model::Sain { bn, .. }, Some(stats)) => {
                if stats.mean.len() != config.dim || stats.var.len() != config.dim {
                    return Err(CheckpointError::Malformed("batch-norm statistics have wrong size".into()));
                }
                *bn = stats;
            }
            (Model::Biasedmf { .. }, None) => {}
            _ => return Err(CheckpointError::Malformed("batch-norm statistics do not match model".into())),
        }

        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != names.len() * 3 || header.adam.len() != names.len() {
            return Err(CheckpointError::Malformed(format!(
                "expected {} tensors, found {count}",
                names.len() * 3
            )));
        }
        let mut read = |expected: &str, shape: (usize, usize)| -> Result<Matrix, CheckpointError> {
            let (name, m) = r.tensor()?;
            if name != expected || m.shape() != shape {
                return Err(CheckpointError::Malformed(format!(
                    "expected tensor {expected} {shape:?}, found {name} {:?}",
                    m.shape()
                )));
            }
            Ok(m)
        };
        let shapes: Vec<(usize, usize)> = model.tensors().iter().map(|(_, m)| m.shape()).collect();
        for ((dst, name), &shape) in model.tensors_mut().into_iter().zip(&names).zip(&shapes) {
            *dst = read(name, shape)?;
        }
        let mut adam = Vec::with_capacity(names.len());
        for ((name, &shape), c) in names.iter().zip(&shapes).zip(&header.adam) {
            let m = read(&format!("adam.m.{name}"), shape)?;
            let v = read(&format!("adam.v.{name}"), shape)?;
            adam.push(AdamState {
                m,
                v,
                t: c.t,
                beta1: c.beta1,
                beta2: c.beta2,
                eps: c.eps,
            });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }

        Ok(Self {
            manifest: header.manifest,
            fingerprint: header.fingerprint,
            best_epoch: header.best_epoch,
            users: header.users,
            items: header.items,
            vocab: header.vocab,
            features: header.features,
            model,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

