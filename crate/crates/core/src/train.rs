//! SGD with momentum, a warmup-plus-cosine learning-rate schedule and a
//! small full-batch-order training loop.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::network::Network;
use crate::ops::{argmax_rows, softmax_cross_entropy};
use crate::params::{Gradients, ParamRole, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-5,
            epochs: 125,
            warmup_epochs: 5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lr)
            || !finite_nonneg(self.momentum)
            || !finite_nonneg(self.weight_decay)
        {
            return Err(Error::Domain(
                "lr, momentum and weight decay must be finite and non-negative".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Domain(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Domain(format!(
                "warmup epochs {} exceed total epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    /// Whole batches per epoch; a trailing partial batch is dropped.
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        (samples / self.batch_size).max(1)
    }

    pub fn schedule(&self, samples: usize) -> LrSchedule {
        let spe = self.steps_per_epoch(samples);
        LrSchedule {
            base: self.lr,
            warmup_steps: self.warmup_epochs * spe,
            total_steps: self.epochs * spe,
        }
    }
}

/// Linear warmup from zero to `base`, then a half cosine down to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_at_position(step as f64)
    }

    /// Same curve at a fractional step, clamped to `[0, total_steps]`.
    pub fn lr_at_position(&self, step: f64) -> f64 {
        let total = self.total_steps as f64;
        let warmup = self.warmup_steps as f64;
        let step = step.clamp(0.0, total);
        if step < warmup {
            return self.base * step / warmup;
        }
        let span = total - warmup;
        if span <= 0.0 {
            return self.base;
        }
        let progress = (step - warmup) / span;
        self.base * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// `v ← m·v + g + wd·w` (decay only on [`ParamRole::Weight`]), `w ← w − lr·v`,
/// then clears every gradient. Buffers are left untouched.
pub fn sgd_step<T: Element>(store: &mut ParamStore<T>, lr: f64, cfg: &TrainConfig) {
    let lr = T::of(lr);
    let m = T::of(cfg.momentum);
    let wd = T::of(cfg.weight_decay);
    for (_, p) in store.iter_mut() {
        if !p.role.is_trainable() {
            continue;
        }
        let decay = if p.role == ParamRole::Weight {
            wd
        } else {
            T::zero()
        };
        let w = p.value.data_mut();
        let v = p.momentum.data_mut();
        for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(p.grad.data()) {
            *v = m * *v + g + decay * *w;
            *w = *w - lr * *v;
        }
    }
    store.zero_grads();
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        mean_loss: f64,
        accuracy: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// First step count after which an evaluation reached `best_accuracy`.
    pub best_at_step: usize,
    pub losses: Vec<f64>,
}

/// Mean cross-entropy and gradients of one batch in train mode. BN batch
/// statistics are returned for the caller to fold into the running buffers.
pub fn loss_and_grads<T: Element>(
    net: &Network,
    store: &ParamStore<T>,
    x: &crate::tensor::Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Gradients<T>, ForwardCtx<T>)> {
    let mut ctx = ForwardCtx::train();
    let (logits, caches) = net.forward(x, store, &mut ctx)?;
    let (loss, grad) = softmax_cross_entropy(&logits, labels)?;
    let loss = loss.as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    let mut grads = Gradients::new();
    net.backward(&caches, &grad, store, &mut grads)?;
    Ok((loss, grads, ctx))
}

/// Fraction of samples whose infer-mode prediction matches the label.
pub fn evaluate<T: Element>(
    net: &Network,
    store: &ParamStore<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let pred = argmax_rows(&net.predict(&x, store)?);
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains in a fixed sample order (batch `b` of every epoch holds samples
/// `b·batch .. (b+1)·batch`) and evaluates after each epoch.
pub fn train_toy<T: Element>(
    net: &Network,
    store: &mut ParamStore<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if data.classes() > net.classes() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, network head has {}",
            data.classes(),
            net.classes()
        )));
    }
    let batch = cfg.batch_size.min(data.len());
    let spe = cfg.steps_per_epoch(data.len());
    let schedule = cfg.schedule(data.len());
    let mut step = 0usize;
    let mut losses = Vec::with_capacity(schedule.total_steps);
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut final_accuracy = 0.0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for b in 0..spe {
            let indices: Vec<usize> = (b * batch..(b + 1) * batch).collect();
            let (x, y) = data.batch(&indices)?;
            let (loss, grads, ctx) = loss_and_grads(net, store, &x, &y)?;
            store.accumulate(&grads)?;
            store.apply_bn_updates(&ctx.bn_updates, ctx.bn)?;
            let lr = schedule.lr_at(step);
            sgd_step(store, lr, cfg);
            sink(&MetricRecord::Step {
                step,
                epoch,
                lr,
                loss,
            })?;
            losses.push(loss);
            epoch_loss += loss;
            step += 1;
        }
        final_accuracy = evaluate(net, store, data, batch)?;
        if final_accuracy > best.0 {
            best = (final_accuracy, step);
        }
        sink(&MetricRecord::Epoch {
            epoch,
            step,
            mean_loss: epoch_loss / spe as f64,
            accuracy: final_accuracy,
        })?;
    }
    Ok(TrainSummary {
        steps: step,
        final_accuracy,
        best_accuracy: best.0,
        best_at_step: best.1,
        losses,
    })
}
