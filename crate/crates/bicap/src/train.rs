//! SGD training loop: Nesterov momentum with weight decay, the piecewise
//! learning-rate schedule, per-epoch metrics, and evaluation.
//!
//! Every step rebinarizes the masters (the tape's binarize op reads them
//! fresh), routes task gradients to binary masters through the clipped
//! straight-through estimator, adds the entropy penalty when configured
//! (differentiated through the tanh surrogate), updates the masters, and
//! clamps binary-layer masters to `[-1, 1]`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, Graph};
use crate::data::{augment, Dataset, Split};
use crate::entropy::{mean_entropy, penalized_loss, EntropyConfig, WeightView};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Schedule milestones as fractions of the epoch budget; the learning
    /// rate is divided by 10 at each.
    pub milestones: (f64, f64),
    /// Entropy penalty; absent disables the term entirely.
    pub entropy: Option<EntropyConfig>,
    pub seed: u64,
    /// Pins the metrics CSV byte-for-byte (wall time is reported as 0).
    pub deterministic: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: (0.5, 0.75),
            entropy: None,
            seed: 1,
            deterministic: false,
            augment: true,
        }
    }
}

/// Step schedule: `lr0` up to the first milestone, `lr0/10` up to the
/// second, `lr0/100` after.
pub fn lr_schedule(epoch: usize, total: usize, lr0: f64) -> f64 {
    lr_schedule_at(epoch, total, lr0, (0.5, 0.75))
}

pub fn lr_schedule_at(epoch: usize, total: usize, lr0: f64, milestones: (f64, f64)) -> f64 {
    let e = epoch as f64;
    let t = total as f64;
    if e >= milestones.1 * t {
        lr0 / 100.0
    } else if e >= milestones.0 * t {
        lr0 / 10.0
    } else {
        lr0
    }
}

/// Per-parameter velocity buffers for Nesterov SGD.
#[derive(Debug)]
pub struct OptimizerState {
    pub velocities: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &Model) -> OptimizerState {
        let mut velocities = Vec::new();
        model.for_each_param(|_, t| velocities.push(Tensor::zeros(t.shape())));
        OptimizerState { velocities, step: 0 }
    }
}

/// One Nesterov SGD update without damping:
/// `g' = g + wd*w; v <- mu*v + g'; w <- w - lr*(g' + mu*v)`.
pub fn sgd_step(
    name: &str,
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd_step '{name}': param {} vs grad {} vs velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of '{name}' is not finite")));
    }
    for i in 0..param.len() {
        let g = grad[i] + weight_decay * param[i];
        velocity[i] = momentum * velocity[i] + g;
        param[i] -= lr * (g + momentum * velocity[i]);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Cumulative optimizer steps at the end of the epoch.
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub h_loss: f64,
    pub mean_entropy: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,step,lr,train_loss,ce_loss,h_loss,mean_entropy,train_acc,val_acc,epoch_seconds";

impl EpochMetrics {
    /// CSV row matching [`METRICS_HEADER`]. In deterministic mode the
    /// wall-time column is written as zero so reruns are byte-identical.
    pub fn csv_row(&self, deterministic: bool) -> String {
        let seconds = if deterministic { 0.0 } else { self.seconds };
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.8},{:.6},{:.4},{:.4},{:.3}",
            self.epoch,
            self.step,
            self.lr,
            self.train_loss,
            self.ce_loss,
            self.h_loss,
            self.mean_entropy,
            self.train_acc,
            self.val_acc,
            seconds
        )
    }
}

fn top1_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

struct EpochStats {
    ce_loss: f64,
    h_loss: f64,
    train_loss: f64,
    train_acc: f64,
    steps: u64,
}

fn run_train_epoch(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    let lr = lr_schedule_at(epoch, cfg.epochs, cfg.lr0, cfg.milestones);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    indices.shuffle(rng);

    let mut ce_sum = 0.0;
    let mut h_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;

    for batch_idx in indices.chunks(cfg.batch_size) {
        let (mut images, labels) = data.gather(batch_idx);
        if cfg.augment {
            augment(&mut images, Split::Train, rng);
        }

        let mut g = Graph::new();
        let out = model.forward(&mut g, images, BnMode::Train)?;
        let ce = g.softmax_cross_entropy(out.logits, &labels)?;
        let loss = match &cfg.entropy {
            Some(ecfg) => {
                let masters: Vec<_> = out
                    .binary_masters
                    .iter()
                    .filter(|(name, _)| covers(ecfg, name))
                    .map(|(_, v)| *v)
                    .collect();
                penalized_loss(&mut g, ce, &masters, ecfg)?
            }
            None => ce,
        };

        let ce_val = g.value(ce).item();
        let loss_val = g.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss became {loss_val} at epoch {epoch} step {}",
                opt.step
            )));
        }
        ce_sum += ce_val * labels.len() as f64;
        h_sum += (loss_val - ce_val) * labels.len() as f64;
        correct += top1_correct(g.value(out.logits), &labels);
        seen += labels.len();

        g.backward(loss)?;

        let mut slot = 0usize;
        let mut step_err = None;
        model.for_each_param_mut(|meta, tensor| {
            if step_err.is_some() {
                return;
            }
            let var = out.params[slot];
            let velocity = &mut opt.velocities[slot];
            slot += 1;
            let zeros;
            let grad = match g.grad(var) {
                Some(gr) => gr.data(),
                None => {
                    zeros = vec![0.0; tensor.numel()];
                    &zeros
                }
            };
            if let Err(e) = sgd_step(
                &meta.name,
                tensor.data_mut(),
                grad,
                velocity.data_mut(),
                lr,
                cfg.momentum,
                cfg.weight_decay,
            ) {
                step_err = Some(e);
                return;
            }
            if meta.clamp {
                for w in tensor.data_mut() {
                    *w = w.clamp(-1.0, 1.0);
                }
            }
        });
        if let Some(e) = step_err {
            return Err(e);
        }
        model.refresh_weights()?;
        opt.step += 1;
    }

    Ok(EpochStats {
        ce_loss: ce_sum / seen as f64,
        h_loss: h_sum / seen as f64,
        train_loss: (ce_sum + h_sum) / seen as f64,
        train_acc: correct as f64 / seen as f64,
        steps: opt.step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean cross-entropy over a dataset, eval mode.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for batch_idx in indices.chunks(batch_size.max(1)) {
        let (images, labels) = data.gather(batch_idx);
        let mut g = Graph::inference();
        let out = model.forward(&mut g, images, BnMode::Eval)?;
        let ce = g.softmax_cross_entropy(out.logits, &labels)?;
        loss_sum += g.value(ce).item() * labels.len() as f64;
        correct += top1_correct(g.value(out.logits), &labels);
    }
    Ok(EvalResult { accuracy: correct as f64 / data.len() as f64, loss: loss_sum / data.len() as f64 })
}

/// Train for the configured epoch budget, evaluating after every epoch.
/// `on_epoch` fires once per epoch with the model state and the fresh
/// metrics row (for CSV streaming and checkpoint cadence).
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if train_data.class_count != val_data.class_count {
        return Err(Error::Data(format!(
            "train/val class counts disagree: {} vs {}",
            train_data.class_count, val_data.class_count
        )));
    }
    if model.config.num_classes != train_data.class_count {
        return Err(Error::Data(format!(
            "model expects {} classes, dataset has {}",
            model.config.num_classes, train_data.class_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(model);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let stats = run_train_epoch(model, train_data, cfg, &mut opt, epoch, &mut rng)?;
        let val = evaluate(model, val_data, cfg.batch_size)?;
        let seconds = t0.elapsed().as_secs_f64();

        let entropy_scope = cfg.entropy.clone().unwrap_or_default();
        let me = if model.binary_conv_layers().is_empty() {
            0.0
        } else {
            mean_entropy(model, &entropy_scope, WeightView::Binary)?
        };

        let metrics = EpochMetrics {
            epoch,
            step: stats.steps,
            lr: lr_schedule_at(epoch, cfg.epochs, cfg.lr0, cfg.milestones),
            train_loss: stats.train_loss,
            ce_loss: stats.ce_loss,
            h_loss: stats.h_loss,
            mean_entropy: me,
            train_acc: stats.train_acc,
            val_acc: val.accuracy,
            seconds,
        };
        on_epoch(model, &metrics)?;
        history.push(metrics);
    }
    Ok(history)
}

fn covers(cfg: &EntropyConfig, name: &str) -> bool {
    match &cfg.scope {
        crate::entropy::EntropyScope::AllBinaryConv => true,
        crate::entropy::EntropyScope::Layers(names) => names.iter().any(|n| n == name),
    }
}

/// Mean and 95% confidence half-width (`1.96 * stderr`) over repeated runs.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Config("confidence_interval needs at least 2 runs".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let stderr = (var / n).sqrt();
    Ok((mean, 1.96 * stderr))
}
