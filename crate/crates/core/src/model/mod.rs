//! Desk-scale network, synthetic data, corruptions, training and
//! prediction.
//!
//! The network is a three-stage strided convolutional backbone followed by
//! the bilateral asymmetry encoder ([`crate::bae`]) and a two-layer head
//! that emits raw NIG parameters, activated by [`crate::nig::activate`].

mod checkpoint;
mod corrupt;
mod io;
mod net;
mod optim;
mod synth;
mod train;

use serde::{Deserialize, Serialize};

use crate::bae::{BaeError, DEFAULT_DROPOUT};
use crate::diffcore::DiffError;
use crate::memory::{MemoryError, DEFAULT_MOMENTUM};
use crate::nig::{NigError, NigPrior, RegularizerMode};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use corrupt::{corrupt, Corruption, CorruptionKind};
pub use io::{read_image, read_split, write_dataset, write_image, write_split, SplitMeta};
pub use net::{ForwardOutput, NetParams, Network, Prediction};
pub use optim::{clip_grad_norm, cosine_warm_restart, AdamW};
pub use synth::{generate_dataset, Dataset, Image, Sample, Split, SyntheticSpec, BONE_LEVEL};
pub use train::{batch_loss, train, train_with, BatchLoss, EpochStats};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input of shape {got:?} does not match the network (expected {expected})")]
    Shape { expected: String, got: Vec<usize> },
    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite { term: &'static str, epoch: usize, step: usize },
    #[error("unknown corruption kind {0:?} (expected gaussian-noise, blur or rotation)")]
    UnknownCorruption(String),
    #[error("severity {severity} is not on the grid for {kind}")]
    Severity { kind: &'static str, severity: f64 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Nig(#[from] NigError),
    #[error(transparent)]
    Bae(#[from] BaeError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Architecture and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of the stride-2 convolution stages.
    pub channels: Vec<usize>,
    pub head_hidden: usize,
    pub dropout: f64,
    pub lambda_kl: f64,
    pub lambda_proto: f64,
    pub prior: NigPrior,
    pub bank_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            head_hidden: 32,
            dropout: DEFAULT_DROPOUT,
            lambda_kl: 0.01,
            lambda_proto: 0.1,
            prior: NigPrior::default(),
            bank_momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channel widths must be positive, got {:?}", self.channels));
        }
        if self.head_hidden == 0 {
            return bad("head width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lambda_kl >= 0.0) || !(self.lambda_proto >= 0.0) {
            return bad(format!("loss weights must be nonnegative (λ_KL {}, λ_proto {})", self.lambda_kl, self.lambda_proto));
        }
        if !(self.bank_momentum > 0.0 && self.bank_momentum <= 1.0) {
            return bad(format!("bank momentum {} outside (0, 1]", self.bank_momentum));
        }
        self.prior.validate()?;
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

/// Optimisation schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Head learning rate; the backbone uses `lr * backbone_lr_ratio`.
    pub lr: f64,
    pub backbone_lr_ratio: f64,
    pub weight_decay: f64,
    /// Epochs per cosine cycle.
    pub restart_period: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss_mode: RegularizerMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            backbone_lr_ratio: 0.1,
            weight_decay: 1e-3,
            restart_period: 20,
            clip_norm: 1.0,
            seed: 7,
            loss_mode: RegularizerMode::Kl,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.restart_period == 0 {
            return bad("epochs, batch size and restart period must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.backbone_lr_ratio > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("backbone ratio and clip norm must be positive, weight decay nonnegative".into());
        }
        Ok(())
    }
}

/// Round-and-clamp discretisation of a continuous severity.
pub fn discretize(gamma: f64) -> usize {
    let top = (crate::memory::NUM_GRADES - 1) as f64;
    if gamma.is_nan() {
        return 0;
    }
    gamma.round().clamp(0.0, top) as usize
}
