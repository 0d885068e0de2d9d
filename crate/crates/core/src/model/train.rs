//! Mini-batch training with best-validation-QWK model selection.
//!
//! The trainer only ever receives the training and validation splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::net::{stack_images, Network};
use super::optim::{clip_grad_norm, cosine_warm_restart, AdamW};
use super::synth::{Image, Sample};
use super::{ModelConfig, ModelError, TrainConfig};
use crate::bae::dropout_mask;
use crate::diffcore::{Array, Tape, Var};
use crate::memory::PrototypeBank;
use crate::nig::{graph, RegularizerMode};
use crate::par::Exec;
use crate::seed;
use crate::trust;

/// Per-epoch record. Loss terms are means over training samples, with the
/// regularizer and alignment already multiplied by their weights so that
/// `total = nll + reg + align`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub nll: f64,
    pub reg: f64,
    pub align: f64,
    pub val_qwk: f64,
    pub val_acc: f64,
    /// Mean `ν + 2α` on the validation split.
    pub val_evidence: f64,
}

/// One recorded batch objective.
pub struct BatchLoss {
    pub tape: Tape,
    /// Parameter leaves in canonical order.
    pub params: Vec<Var>,
    /// Scalar objective `mean(nll + λ_KL·reg) + λ_proto·align`.
    pub loss: Var,
    pub nll: f64,
    pub reg: f64,
    pub align: f64,
    /// Embeddings `[B, C]` (after dropout, if any).
    pub h: Array,
}

/// Record the batch objective on a fresh tape.
pub fn batch_loss(
    net: &Network,
    images: &[&Image],
    grades: &[usize],
    bank: &PrototypeBank,
    mode: RegularizerMode,
    dropout: Option<Array>,
) -> Result<BatchLoss, ModelError> {
    let cfg = &net.config;
    let batch = stack_images(images)?;
    let mut tape = Tape::new();
    let nodes = net.forward_nodes(&mut tape, batch, true, dropout)?;
    let y = tape.constant(Array::from_vec(grades.iter().map(|&g| g as f64).collect()));
    let terms = graph::total_loss(&mut tape, &nodes.nig, y, &cfg.prior, cfg.lambda_kl, mode)?;
    let mut loss = tape.mean(terms.total);
    let mut align = 0.0;
    if cfg.lambda_proto > 0.0 || !bank.is_empty() {
        if let Some(a) = bank.align_node(&mut tape, nodes.bae.h, grades)? {
            align = tape.value(a).item();
            if cfg.lambda_proto > 0.0 {
                let w = tape.scale(a, cfg.lambda_proto);
                loss = tape.add(loss, w)?;
            }
        }
    }
    let nll = tape.value(terms.nll).data().iter().sum::<f64>() / grades.len() as f64;
    let reg = tape.value(terms.regularizer).data().iter().sum::<f64>() / grades.len() as f64;
    let h = tape.value(nodes.bae.h).clone();
    Ok(BatchLoss { tape, params: nodes.params, loss, nll, reg, align, h })
}

fn finite_or(value: f64, term: &'static str, epoch: usize, step: usize) -> Result<f64, ModelError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ModelError::NonFinite { term, epoch, step })
    }
}

/// Validation QWK, accuracy and mean evidence.
fn validate(net: &Network, val: &[Sample]) -> Result<(f64, f64, f64), ModelError> {
    let images: Vec<&Image> = val.iter().map(|s| &s.image).collect();
    let preds = net.predict(&images, Exec::default())?;
    let truth: Vec<usize> = val.iter().map(|s| s.grade).collect();
    let pred: Vec<usize> = preds.iter().map(|p| p.grade).collect();
    let qwk = trust::qwk(&truth, &pred).map_err(|e| ModelError::Config(e.to_string()))?;
    let acc = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / val.len() as f64;
    let evidence = preds.iter().map(|p| p.nig.evidence()).sum::<f64>() / val.len() as f64;
    Ok((qwk, acc, evidence))
}

/// Train from scratch and return the best-validation-QWK checkpoint.
pub fn train(model_cfg: &ModelConfig, train_cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<Checkpoint, ModelError> {
    train_with(model_cfg, train_cfg, train, val, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Checkpoint, ModelError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::Config("training and validation splits must be nonempty".into()));
    }
    let seed = train_cfg.seed;
    let mut net = Network::new(model_cfg.clone(), &mut seed::rng_for(seed, "model/init"))?;
    let mut bank = PrototypeBank::new(model_cfg.embed_dim(), model_cfg.bank_momentum)?;
    let sizes: Vec<usize> = net.params.arrays().iter().map(|a| a.len()).collect();
    let backbone = net.params.backbone_len();
    let mut opt = AdamW::new(&sizes, train_cfg.weight_decay);
    let mut shuffle_rng = seed::rng_for(seed, "train/shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(train_cfg.batch_size);

    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, Network, PrototypeBank)> = None;
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut tot, mut nll, mut reg, mut align) = (0.0, 0.0, 0.0, 0.0);
        let mut lr_head = train_cfg.lr;
        for (step, idx) in order.chunks(train_cfg.batch_size).enumerate() {
            let progress = epoch as f64 + step as f64 / steps_per_epoch as f64;
            lr_head = cosine_warm_restart(train_cfg.lr, progress, train_cfg.restart_period);
            let images: Vec<&Image> = idx.iter().map(|&i| &train[i].image).collect();
            let grades: Vec<usize> = idx.iter().map(|&i| train[i].grade).collect();
            let global_step = (epoch * steps_per_epoch + step) as u64;
            let mask = (model_cfg.dropout > 0.0).then(|| {
                let mut rng = seed::rng(seed::derive_indexed(seed, "train/dropout", global_step));
                dropout_mask(&[idx.len(), model_cfg.embed_dim()], model_cfg.dropout, &mut rng)
            });
            let bl = batch_loss(&net, &images, &grades, &bank, train_cfg.loss_mode, mask)?;
            let n = idx.len() as f64;
            nll += n * finite_or(bl.nll, "nll", epoch, step)?;
            let reg_name = match train_cfg.loss_mode {
                RegularizerMode::Kl => "kl",
                RegularizerMode::Evidence => "evidence penalty",
            };
            reg += n * model_cfg.lambda_kl * finite_or(bl.reg, reg_name, epoch, step)?;
            align += n * model_cfg.lambda_proto * finite_or(bl.align, "align", epoch, step)?;
            tot += n * finite_or(bl.tape.value(bl.loss).item(), "total", epoch, step)?;

            let mut grads_tape = bl.tape.backward(bl.loss)?;
            let mut grads: Vec<Array> = bl
                .params
                .iter()
                .zip(net.params.arrays())
                .map(|(&v, a)| grads_tape.take(v).unwrap_or_else(|| Array::zeros(a.shape())))
                .collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFinite { term: "gradient", epoch, step });
            }
            clip_grad_norm(&mut grads, train_cfg.clip_norm);
            let lrs: Vec<f64> =
                (0..sizes.len()).map(|i| if i < backbone { lr_head * train_cfg.backbone_lr_ratio } else { lr_head }).collect();
            opt.step(&mut net.params.arrays_mut(), &grads, &lrs);

            let c = bl.h.shape()[1];
            for (row, &g) in bl.h.data().chunks(c).zip(&grades) {
                bank.update(row, g)?;
            }
        }
        let (val_qwk, val_acc, val_evidence) = validate(&net, val)?;
        let n = train.len() as f64;
        let stats = EpochStats {
            epoch,
            lr: lr_head,
            total: tot / n,
            nll: nll / n,
            reg: reg / n,
            align: align / n,
            val_qwk,
            val_acc,
            val_evidence,
        };
        on_epoch(&stats);
        history.push(stats);
        if best.as_ref().is_none_or(|(q, ..)| val_qwk > *q) {
            best = Some((val_qwk, epoch, net.clone(), bank.clone()));
        }
    }
    let (_, best_epoch, net, bank) = best.expect("at least one epoch");
    Ok(Checkpoint {
        model: net.config,
        train: train_cfg.clone(),
        params: net.params,
        bank,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synth::{Split, SyntheticSpec};

    fn tiny_data() -> (Vec<Sample>, Vec<Sample>) {
        let spec = SyntheticSpec { n_train: 40, n_val: 20, n_test: 0, ..Default::default() };
        (spec.generate_split(Split::Train, Exec::default()).unwrap(), spec.generate_split(Split::Val, Exec::default()).unwrap())
    }

    #[test]
    fn deterministic_history() {
        let (tr, va) = tiny_data();
        let tc = TrainConfig { epochs: 2, batch_size: 16, ..Default::default() };
        let a = train(&ModelConfig::default(), &tc, &tr, &va).unwrap();
        let b = train(&ModelConfig::default(), &tc, &tr, &va).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.len(), 2);
    }

    #[test]
    fn pure_nll_reduction_runs() {
        let (tr, va) = tiny_data();
        let mc = ModelConfig { lambda_kl: 0.0, lambda_proto: 0.0, ..Default::default() };
        let tc = TrainConfig { epochs: 1, batch_size: 20, ..Default::default() };
        let ck = train(&mc, &tc, &tr, &va).unwrap();
        let h = &ck.history[0];
        assert!(h.total.is_finite());
        assert!((h.total - h.nll).abs() < 1e-9);
    }

    #[test]
    fn empty_split_rejected() {
        let (tr, _) = tiny_data();
        assert!(train(&ModelConfig::default(), &TrainConfig::default(), &tr, &[]).is_err());
    }
}
