//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ENDX" | u32 version | u32 header length | header JSON
//! per parameter, in name order:
//!   u32 name length | name bytes | u32 rank | u64 extent * rank | f32 * numel
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::Vocabulary;
use crate::error::{EndxError, Result};
use crate::losses::{GamConfig, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ENDX";
pub const FORMAT_VERSION: u32 = 1;
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub gam: GamConfig,
    pub loss_weights: LossWeights,
    pub vocab_hash: String,
    pub step: u64,
    pub num_params: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterStore<f32>,
}

impl Checkpoint {
    pub fn new(model: &Model<f32>, gam: &GamConfig, loss_weights: &LossWeights, vocab: &Vocabulary) -> Self {
        Self {
            header: CheckpointHeader {
                model: model.config.clone(),
                gam: gam.clone(),
                loss_weights: loss_weights.clone(),
                vocab_hash: vocab.fingerprint(),
                step: model.params.steps_taken(),
                num_params: model.params.len(),
            },
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_values() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(EndxError::NotACheckpoint);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(EndxError::IncompatibleVersion { found: version, supported: FORMAT_VERSION });
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| EndxError::Checkpoint(format!("bad header: {e}")))?;
        let mut params = ParameterStore::new();
        for _ in 0..header.num_params {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| EndxError::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| EndxError::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        if r.at != bytes.len() {
            return Err(EndxError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        params.step = header.step;
        Ok(Self { header, params })
    }

    /// The model this checkpoint describes; every expected parameter must be
    /// present with its expected shape.
    pub fn into_model(self) -> Result<Model<f32>> {
        Model::from_params(self.header.model, self.params)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EndxError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| EndxError::io(dir, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| EndxError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| EndxError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// SHA-256 over every parameter's name, shape and raw values.
pub fn parameter_digest(params: &ParameterStore<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Where the vocabulary of a checkpoint lives.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name(VOCAB_FILE)
}

/// Loads a checkpoint together with its vocabulary and checks they belong
/// together.
pub fn load_model(path: &Path) -> Result<(Model<f32>, Vocabulary, CheckpointHeader)> {
    let ckpt = load_checkpoint(path)?;
    let vocab = Vocabulary::load(&vocab_path(path))?;
    if vocab.fingerprint() != ckpt.header.vocab_hash {
        return Err(EndxError::Checkpoint(format!("{} does not match the checkpoint vocabulary", vocab_path(path).display())));
    }
    let header = ckpt.header.clone();
    Ok((ckpt.into_model()?, vocab, header))
}
