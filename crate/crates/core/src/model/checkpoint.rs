//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` little-endian manifest length, JSON manifest,
//! then every parameter array as raw little-endian `f64` in manifest order.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{NetParams, Network, Prediction};
use super::synth::Image;
use super::train::EpochStats;
use super::{ModelConfig, ModelError, TrainConfig};
use crate::diffcore::Array;
use crate::memory::PrototypeBank;
use crate::par::Exec;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EVDNCKPT";

/// Trained model plus everything needed to reproduce its evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: NetParams,
    pub bank: PrototypeBank,
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    seed: u64,
    best_epoch: usize,
    history: Vec<EpochStats>,
    bank: PrototypeBank,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn network(&self) -> Network {
        Network { config: self.model.clone(), params: self.params.clone() }
    }

    pub fn predict(&self, images: &[&Image], exec: Exec) -> Result<Vec<Prediction>, ModelError> {
        self.network().predict(images, exec)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let tensors = self
            .params
            .names()
            .into_iter()
            .zip(self.params.arrays())
            .map(|(name, a)| TensorEntry { name, shape: a.shape().to_vec() })
            .collect();
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.train.seed,
            best_epoch: self.best_epoch,
            history: self.history.clone(),
            bank: self.bank.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let len = u32::try_from(json.len()).map_err(|_| ModelError::Checkpoint("manifest too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.params.arrays() {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", manifest.version)));
        }
        manifest.model.validate()?;
        let mut rng = crate::seed::rng(0);
        let mut params = NetParams::init(&manifest.model, &mut rng);
        let names = params.names();
        if names.len() != manifest.tensors.len() {
            return Err(bad("tensor table does not match the architecture"));
        }
        let mut offset = 12 + len;
        for ((slot, name), entry) in params.arrays_mut().into_iter().zip(&names).zip(&manifest.tensors) {
            if &entry.name != name || entry.shape != slot.shape() {
                return Err(ModelError::Checkpoint(format!("tensor {} has unexpected name or shape", entry.name)));
            }
            let n = slot.len();
            let raw = bytes.get(offset..offset + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            *slot = Array::new(entry.shape.clone(), data)?;
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            model: manifest.model,
            train: manifest.train,
            params,
            bank: manifest.bank,
            history: manifest.history,
            best_epoch: manifest.best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
