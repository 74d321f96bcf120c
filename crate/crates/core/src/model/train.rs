use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::exec::{DecodeTarget, ExecOptions};
use super::{dropout_rng, LRSchedule, ModelGraph};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::{MarginParams, NodeId, Tape, Tensor};

/// Samples per gradient chunk. Chunks are the unit of parallel work and are
/// reduced in a fixed order, so results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Margin loss on capsule lengths plus the weighted reconstruction SSE.
    CapsuleMargin,
}

/// Learning-rate multiplier for a contiguous range of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LrGroup {
    pub layers: Range<usize>,
    pub multiplier: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub schedule: LRSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// Layer indices whose parameters never change.
    pub freeze: BTreeSet<usize>,
    /// Later groups override earlier ones where ranges overlap.
    pub lr_groups: Vec<LrGroup>,
    pub loss: LossKind,
    pub reconstruction_weight: f32,
    pub seed: u64,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::default(),
            schedule: LRSchedule::Constant { lr: 1e-3 },
            batch_size: 32,
            epochs: 50,
            freeze: BTreeSet::new(),
            lr_groups: Vec::new(),
            loss: LossKind::CrossEntropy,
            reconstruction_weight: crate::capsnet::RECONSTRUCTION_WEIGHT,
            seed: 0,
            verbose: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::contract("batch size and epochs must be positive"));
        }
        if !(self.reconstruction_weight >= 0.0) {
            return Err(Error::contract("reconstruction weight must be nonnegative"));
        }
        if self.lr_groups.iter().any(|g| !(g.multiplier >= 0.0) || !g.multiplier.is_finite()) {
            return Err(Error::contract("learning-rate multipliers must be finite and nonnegative"));
        }
        Ok(())
    }

    fn multiplier(&self, layer: usize) -> f32 {
        self.lr_groups.iter().rev().find(|g| g.layers.contains(&layer)).map_or(1.0, |g| g.multiplier)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Learning rate at the first step of the epoch.
    pub lr: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// `epoch,loss,train_acc,val_acc,lr`; a missing validation accuracy is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc,val_acc,lr\n");
        for r in &self.epochs {
            let val = r.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.6},{:.6},{},{}", r.epoch, r.loss, r.train_acc, val, r.lr);
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

enum OptState {
    Sgd { velocity: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32> },
}

struct ChunkResult {
    grads: Vec<Tensor>,
    loss: f64,
    correct: usize,
}

/// Trains a copy of `model`; see [`train_with_validation`].
pub fn train(model: &ModelGraph, data: &LabeledImageSet, cfg: &TrainConfig) -> Result<(ModelGraph, History)> {
    train_with_validation(model, data, None, cfg)
}

/// Mini-batch training. Frozen layers and batch-norm statistics are never
/// updated. Identical inputs and seed give bit-identical results regardless
/// of the rayon pool size.
pub fn train_with_validation(
    model: &ModelGraph,
    data: &LabeledImageSet,
    validation: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
) -> Result<(ModelGraph, History)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if data.image_shape() != model.input_shape() {
        return Err(Error::dim(format!("images {:?} vs model input {:?}", data.image_shape(), model.input_shape())));
    }
    if let Some(&bad) = data.labels().iter().find(|&&l| l >= model.class_count()) {
        return Err(Error::contract(format!("label {bad} out of range for {} classes", model.class_count())));
    }
    if cfg.loss == LossKind::CrossEntropy && model.has_decoder() {
        return Err(Error::contract("cross-entropy training does not drive a decoder; use the capsule margin loss"));
    }

    let mut model = model.clone();
    let trainable: Vec<bool> = model.params().iter().map(|p| p.trainable() && !cfg.freeze.contains(&p.layer)).collect();
    let active: Vec<usize> = (0..trainable.len()).filter(|&i| trainable[i]).collect();
    let mut state: Vec<OptState> = active
        .iter()
        .map(|&i| {
            let n = model.params()[i].value.len();
            match cfg.optimizer {
                Optimizer::Sgd { .. } => OptState::Sgd { velocity: vec![0.0; n] },
                Optimizer::Adam { .. } => OptState::Adam { m: vec![0.0; n], v: vec![0.0; n] },
            }
        })
        .collect();

    let decode = model.has_decoder() && cfg.reconstruction_weight > 0.0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = dropout_rng(cfg.seed, u64::MAX - epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let epoch_lr = cfg.schedule.lr(epoch, step);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
            let results: Vec<ChunkResult> = chunks
                .par_iter()
                .map(|chunk| run_chunk(&model, data, chunk, &trainable, &active, cfg, epoch, decode, scale))
                .collect::<Result<_>>()?;

            let mut iter = results.into_iter();
            let mut total = iter.next().expect("batch is nonempty");
            for r in iter {
                for (acc, g) in total.grads.iter_mut().zip(&r.grads) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                total.loss += r.loss;
                total.correct += r.correct;
            }
            if !total.loss.is_finite() {
                return Err(Error::Numeric { step, message: format!("non-finite loss in epoch {epoch}") });
            }
            loss_sum += total.loss;
            correct += total.correct;

            let lr = cfg.schedule.lr(epoch, step);
            apply_update(&mut model, &active, &mut state, &total.grads, cfg, lr, step + 1);
            step += 1;
        }
        let val_acc = validation.map(|v| accuracy(&model, v)).transpose()?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
            lr: epoch_lr,
        };
        if cfg.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.5}  train_acc {:.4}  val_acc {}  lr {:.6}",
                record.epoch,
                record.loss,
                record.train_acc,
                record.val_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
                record.lr
            );
        }
        history.epochs.push(record);
    }
    Ok((model, history))
}

#[allow(clippy::too_many_arguments)]
fn run_chunk(
    model: &ModelGraph,
    data: &LabeledImageSet,
    chunk: &[usize],
    trainable: &[bool],
    active: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    decode: bool,
    scale: f32,
) -> Result<ChunkResult> {
    let mut grads: Vec<Tensor> = active.iter().map(|&i| model.params()[i].value.zeros_like()).collect();
    let mut loss_total = 0.0f64;
    let mut correct = 0usize;
    for &sample in chunk {
        let label = data.label(sample);
        let mut rng = dropout_rng(cfg.seed, ((epoch as u64) << 32) | sample as u64);
        let mut tape = Tape::new();
        let x = tape.constant(data.image_tensor(sample));
        let opts = ExecOptions {
            training: true,
            trainable: Some(trainable),
            dropout_rng: Some(&mut rng),
            decode: if decode { DecodeTarget::Class(label) } else { DecodeTarget::Skip },
        };
        let rec = model.record(&mut tape, x, opts)?;
        if crate::tensor::argmax(tape.value(rec.logits).data()) == label {
            correct += 1;
        }
        let loss = sample_loss(&mut tape, &rec, cfg, label, &data.image_tensor(sample))?;
        loss_total += tape.value(loss).data()[0] as f64;
        let mut sinks: Vec<(NodeId, &mut Tensor)> =
            active.iter().map(|&i| rec.params[i]).zip(grads.iter_mut()).collect();
        tape.backward_into(loss, scale, &mut sinks)?;
    }
    Ok(ChunkResult { grads, loss: loss_total, correct })
}

fn sample_loss(tape: &mut Tape<'_>, rec: &super::Recorded, cfg: &TrainConfig, label: usize, image: &Tensor) -> Result<NodeId> {
    match cfg.loss {
        LossKind::CrossEntropy => tape.softmax_cross_entropy(rec.logits, label),
        LossKind::CapsuleMargin => {
            let margin = tape.margin_loss(rec.logits, label, MarginParams::default())?;
            match rec.decoded {
                Some(decoded) => {
                    let sse = tape.sse(decoded, image)?;
                    let weighted = tape.scale(sse, cfg.reconstruction_weight);
                    tape.add(margin, weighted)
                }
                None => Ok(margin),
            }
        }
    }
}

fn apply_update(
    model: &mut ModelGraph,
    active: &[usize],
    state: &mut [OptState],
    grads: &[Tensor],
    cfg: &TrainConfig,
    lr: f32,
    t: usize,
) {
    for ((&pi, st), g) in active.iter().zip(state.iter_mut()).zip(grads) {
        let layer = model.params()[pi].layer;
        let lr = lr * cfg.multiplier(layer);
        let w = model.params_mut()[pi].value.data_mut();
        match (st, cfg.optimizer) {
            (OptState::Sgd { velocity }, Optimizer::Sgd { momentum }) => {
                for ((w, v), &g) in w.iter_mut().zip(velocity.iter_mut()).zip(g.data()) {
                    *v = momentum * *v + g;
                    *w -= lr * *v;
                }
            }
            (OptState::Adam { m, v }, Optimizer::Adam { beta1, beta2, eps }) => {
                let bc1 = 1.0 - (beta1 as f64).powi(t as i32);
                let bc2 = 1.0 - (beta2 as f64).powi(t as i32);
                let step = (lr as f64 * bc2.sqrt() / bc1) as f32;
                for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= step * *m / (v.sqrt() + eps);
                }
            }
            _ => unreachable!("optimizer state matches the configured optimizer"),
        }
    }
}

/// Fraction of `data` the model classifies correctly (inference mode).
pub fn accuracy(model: &ModelGraph, data: &LabeledImageSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot score an empty set"));
    }
    let preds = model.predict(data.images())?;
    let hits = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}
