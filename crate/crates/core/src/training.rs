//! Binary cross-entropy training with SGD or Adam, seeded batching and
//! early stopping on validation loss.

use std::path::Path;
use std::time::Instant;

use cbamnet_tensor::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, Model, Network};
use crate::data::LoadedSet;
use crate::error::{config_err, data_err, Error, Result};
use crate::preprocess::PreprocessConfig;
use crate::rng::derive_seed;

/// Mean over the batch of `−(y·log p + (1−y)·log(1−p))` where `p` is the
/// class-1 softmax probability of 2-logit rows, evaluated via log-softmax.
pub fn bce_loss<'t>(logits: Var<'t>, labels: &Tensor) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(
            TensorError::Shape(format!("bce_loss expects (b, 2) logits, got {shape:?}")).into(),
        );
    }
    let b = shape[0];
    if labels.shape() != [b] {
        return data_err(format!("{} labels for {b} logit rows", labels.len()));
    }
    if let Some(v) = labels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return data_err(format!("labels must be 0 or 1, got {v}"));
    }
    let y = labels.data();
    let onehot = Tensor::from_fn(&[b, 2], |i| {
        if (i % 2 == 1) == (y[i / 2] == 1.0) {
            1.0
        } else {
            0.0
        }
    });
    let picked = logits.log_softmax(1)?.mul(logits.tape().constant(onehot))?;
    Ok(picked.sum().scale(-1.0 / b as f64))
}

fn check_pairs(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TensorError::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        ))
        .into());
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TensorError::Contract(format!(
                "gradient {i} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            ))
            .into());
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_pairs(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
            *a -= lr * b;
        }
    }
    Ok(())
}

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`. With `μ = 0` this is
/// [`sgd_step`].
pub fn sgd_momentum_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut Vec<Tensor>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_pairs(params, grads)?;
    if velocity.is_empty() {
        *velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((a, b), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *m = momentum * *m + b;
            *a -= lr * *m;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments and the step count `t` of the last update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

/// One bias-corrected Adam update; increments `state.t` first.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamConfig,
) -> Result<()> {
    check_pairs(params, grads)?;
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(
            TensorError::Contract("optimizer state does not match parameters".into()).into(),
        );
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powf(state.t as f64);
    let c2 = 1.0 - hp.beta2.powf(state.t as f64);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((a, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            *a -= lr * (*mi / c1) / ((*vi / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping_patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub sgd_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            batch_size: 16,
            max_epochs: 100,
            early_stopping_patience: 10,
            seed: 0,
            adam: AdamConfig::default(),
            sgd_momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if self.early_stopping_patience == 0 {
            return config_err("early_stopping_patience must be at least 1");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return config_err("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return config_err("sgd_momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Tracks the best validation loss; the counter resets only on a strict
/// improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_validation_loss: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_validation_loss: f64::INFINITY,
            best_epoch: None,
            epochs_since_improvement: 0,
        }
    }

    /// Records an epoch's validation loss and reports whether it improved.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best_validation_loss {
            self.best_validation_loss = loss;
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Wall time of the epoch.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_acc, e.seconds
            ));
        }
        out
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let (c, j) = (csv_path.as_ref(), json_path.as_ref());
        std::fs::write(c, self.to_csv()).map_err(|e| Error::io(c, e))?;
        let json = serde_json::to_string_pretty(self).expect("log serializes");
        std::fs::write(j, json + "\n").map_err(|e| Error::io(j, e))
    }
}

/// Loss and accuracy of `model` in eval mode over `set`.
pub fn evaluate_loss(
    model: &Model,
    set: &LoadedSet,
    cfg: &PreprocessConfig,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for batch in set.batches(batch_size, None, None, cfg)? {
        let batch = batch?;
        let tape = Tape::new();
        let p = model.params.map(&mut |_, t| tape.constant(t.clone()));
        let logits = forward(&model.config, &p, tape.constant(batch.x), false, 0)?;
        let n = batch.labels.len();
        loss += bce_loss(logits, &batch.labels)?.item()? * n as f64;
        let lv = logits.value();
        for i in 0..n {
            let pred = (lv.at(&[i, 1]) > lv.at(&[i, 0])) as u8 as f64;
            correct += (pred == batch.labels.data()[i]) as usize;
        }
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

enum OptState {
    Sgd(Vec<Tensor>),
    Adam(AdamState),
}

fn flatten(net: &Network<Tensor>) -> Vec<Tensor> {
    net.named().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Trains `model` and returns the weights of the epoch with the lowest
/// validation loss. Epoch `e` shuffles with `derive_seed(derive_seed(seed, e), 0)`,
/// augments with stream 1 and seeds batch `k`'s dropout with stream `k + 2`.
pub fn train(
    model: &Model,
    train_set: &LoadedSet,
    val_set: &LoadedSet,
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return data_err("training and validation sets must be non-empty");
    }
    let mut current = model.clone();
    let mut best = model.clone();
    let mut params = flatten(&current.params);
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => OptState::Sgd(Vec::new()),
        OptimizerKind::Adam => OptState::Adam(AdamState::default()),
    };
    let mut stopper = EarlyStopping::new(cfg.early_stopping_patience);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let mut total = 0.0;
        let iter = train_set.batches(
            cfg.batch_size,
            Some(derive_seed(epoch_seed, 0)),
            Some(derive_seed(epoch_seed, 1)),
            pre,
        )?;
        for (k, batch) in iter.enumerate() {
            let batch = batch?;
            let tape = Tape::new();
            let leaves = current.params.leaves(&tape);
            let logits = forward(
                &current.config,
                &leaves,
                tape.constant(batch.x),
                true,
                derive_seed(epoch_seed, k as u64 + 2),
            )?;
            let loss = bce_loss(logits, &batch.labels)?;
            let lv = loss.item()?;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss is {lv} at epoch {epoch}, batch {k}"
                )));
            }
            total += lv * batch.labels.len() as f64;
            let grads = tape.backward(loss)?;
            let mut flat = Vec::with_capacity(params.len());
            for (name, v) in leaves.named() {
                let g = grads
                    .get(*v)
                    .ok_or_else(|| TensorError::Contract(format!("no gradient reached {name}")))?;
                flat.push(g.clone());
            }
            match &mut opt {
                OptState::Sgd(vel) => {
                    sgd_momentum_step(&mut params, &flat, vel, cfg.learning_rate, cfg.sgd_momentum)?
                }
                OptState::Adam(state) => {
                    adam_step(&mut params, &flat, state, cfg.learning_rate, &cfg.adam)?
                }
            }
            for ((name, _), t) in current.params.named().into_iter().zip(&params) {
                if !t.is_finite() {
                    return Err(Error::Numeric(format!(
                        "parameter {name} became non-finite at epoch {epoch}, batch {k}"
                    )));
                }
            }
            current.params = current
                .params
                .rebuild(params.clone())
                .expect("same structure");
        }
        let (val_loss, val_acc) = evaluate_loss(&current, val_set, pre, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss is {val_loss} at epoch {epoch}"
            )));
        }
        if stopper.observe(epoch, val_loss) {
            best = current.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
            val_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
        if stopper.should_stop() {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = stopper.best_epoch.unwrap_or(0);
    Ok((best, log))
}
