//! Class-prototype memory bank.
//!
//! One prototype per grade, updated as an exponential moving average of
//! the embeddings seen for that grade. Prototypes are constants from the
//! point of view of the training graph; the alignment loss only pulls the
//! embedding toward its class prototype.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, DiffError, Tape, Var};

pub const NUM_GRADES: usize = 5;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MemoryError {
    #[error("grade {0} outside 0..{NUM_GRADES}")]
    LabelOutOfRange(usize),
    #[error("embedding has dimension {got}, bank expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("momentum must lie in (0, 1], got {0}")]
    Momentum(f64),
    #[error("no prototype has been initialized")]
    Empty,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    dim: usize,
    momentum: f64,
    prototypes: Vec<Option<Vec<f64>>>,
    counts: Vec<u64>,
}

/// Result of an alignment query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub loss: f64,
    /// `false` when the class prototype is not yet initialized; the loss is
    /// then reported as zero.
    pub initialized: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl PrototypeBank {
    /// `momentum = 1` freezes prototypes after their first update.
    pub fn new(dim: usize, momentum: f64) -> Result<Self, MemoryError> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(MemoryError::Momentum(momentum));
        }
        Ok(Self { dim, momentum, prototypes: vec![None; NUM_GRADES], counts: vec![0; NUM_GRADES] })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn prototype(&self, grade: usize) -> Option<&[f64]> {
        self.prototypes.get(grade).and_then(|p| p.as_deref())
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.iter().all(Option::is_none)
    }

    fn check(&self, h: &[f64], grade: usize) -> Result<(), MemoryError> {
        if grade >= NUM_GRADES {
            return Err(MemoryError::LabelOutOfRange(grade));
        }
        if h.len() != self.dim {
            return Err(MemoryError::Dimension { expected: self.dim, got: h.len() });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(MemoryError::NonFinite);
        }
        Ok(())
    }

    /// EMA update of the prototype for `grade`; the first update copies `h`.
    pub fn update(&mut self, h: &[f64], grade: usize) -> Result<(), MemoryError> {
        self.check(h, grade)?;
        let m = self.momentum;
        match &mut self.prototypes[grade] {
            Some(p) => {
                for (pv, hv) in p.iter_mut().zip(h) {
                    *pv = m * *pv + (1.0 - m) * hv;
                }
            }
            slot @ None => *slot = Some(h.to_vec()),
        }
        self.counts[grade] += 1;
        Ok(())
    }

    /// `1 − cos(h, prototype_k)`.
    pub fn align_loss(&self, h: &[f64], grade: usize) -> Result<Alignment, MemoryError> {
        self.check(h, grade)?;
        Ok(match self.prototype(grade) {
            Some(p) => Alignment { loss: 1.0 - cosine(h, p), initialized: true },
            None => Alignment { loss: 0.0, initialized: false },
        })
    }

    /// Most similar initialized prototype; ties go to the lowest grade.
    pub fn nearest_prototype(&self, h: &[f64]) -> Result<(usize, f64), MemoryError> {
        if h.len() != self.dim {
            return Err(MemoryError::Dimension { expected: self.dim, got: h.len() });
        }
        let mut best: Option<(usize, f64)> = None;
        for (k, p) in self.prototypes.iter().enumerate() {
            if let Some(p) = p {
                let s = cosine(h, p);
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((k, s));
                }
            }
        }
        best.ok_or(MemoryError::Empty)
    }

    /// Mean alignment loss over a `[B, C]` embedding node on a tape.
    /// Samples whose class prototype is uninitialized contribute zero.
    /// Returns `None` when no sample in the batch has a prototype.
    pub fn align_node(&self, tape: &mut Tape, h: Var, grades: &[usize]) -> Result<Option<Var>, MemoryError> {
        let shape = tape.value(h).shape().to_vec();
        let [b, c] = shape[..] else {
            return Err(MemoryError::Dimension { expected: self.dim, got: shape.iter().product() });
        };
        if c != self.dim {
            return Err(MemoryError::Dimension { expected: self.dim, got: c });
        }
        let mut unit = vec![0.0; b * c];
        let mut mask = vec![0.0; b];
        for (i, &g) in grades.iter().enumerate().take(b) {
            if g >= NUM_GRADES {
                return Err(MemoryError::LabelOutOfRange(g));
            }
            if let Some(p) = self.prototype(g) {
                let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (u, v) in unit[i * c..(i + 1) * c].iter_mut().zip(p) {
                        *u = v / n;
                    }
                    mask[i] = 1.0;
                }
            }
        }
        let active = mask.iter().sum::<f64>();
        if active == 0.0 {
            return Ok(None);
        }
        // 1 − h·p̂ / |h|, masked, averaged over the batch
        let pv = tape.constant(Array::new(vec![b, c], unit)?);
        let hp = tape.mul(h, pv)?;
        let dot = tape.sum_rows(hp)?;
        let hh = tape.square(h);
        let sq = tape.sum_rows(hh)?;
        let sq = tape.add_scalar(sq, 1e-12);
        let norm = tape.sqrt(sq)?;
        let cos = tape.div(dot, norm)?;
        let loss = tape.scale(cos, -1.0);
        let loss = tape.add_scalar(loss, 1.0);
        let m = tape.constant(Array::from_vec(mask));
        let masked = tape.mul(loss, m)?;
        let total = tape.sum(masked);
        Ok(Some(tape.scale(total, 1.0 / b as f64)))
    }
}
