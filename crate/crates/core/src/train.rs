//! Shared supervised training machinery: mini-batch cross-entropy steps with
//! Adam and early stopping on validation accuracy.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetBundle, Example};
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{self, loss, AdamConfig, AdamState, ClassifierSpec, L2Scope, Mode, Network, Tensor};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs without a strict validation-accuracy improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            patience: 25,
            max_epochs: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Checkpoint with the best validation accuracy.
    pub model: Network,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl FitResult {
    pub fn seconds_per_epoch(&self) -> f64 {
        mean_seconds(self.history.iter().map(|h| h.seconds))
    }
}

pub(crate) fn mean_seconds(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Tracks the best validation accuracy; ties keep the earliest epoch.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_acc: f64,
    best_epoch: usize,
    best_model: Option<Network>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_acc: f64::NEG_INFINITY,
            best_epoch: 0,
            best_model: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns `false` once patience is exhausted.
    pub fn observe(&mut self, epoch: usize, val_acc: f64, model: &Network) -> bool {
        if val_acc > self.best_acc {
            self.best_acc = val_acc;
            self.best_epoch = epoch;
            self.best_model = Some(model.clone());
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale < self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn into_best(self) -> Option<(Network, usize)> {
        self.best_model.map(|m| (m, self.best_epoch))
    }
}

/// Optional l2 term added to the batch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Term {
    pub weight: f64,
    pub scope: L2Scope,
}

/// Dropout seed for batch `batch` of epoch `epoch`.
pub fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed::derive(seed, &[seed::TAG_DROPOUT, epoch as u64, batch as u64])
}

/// One cross-entropy update over all trainable slots. Returns the batch loss
/// (cross-entropy plus any l2 term).
pub fn classification_step(
    net: &mut Network,
    opt: &mut AdamState,
    x: &Tensor,
    labels: &[usize],
    mode: Mode,
    l2: Option<L2Term>,
) -> Result<f64> {
    let trace = net.forward_traced(x, mode)?;
    let mut value = loss::cross_entropy(trace.output(), labels)?;
    let upstream = loss::cross_entropy_grad(trace.output(), labels)?;
    let mut grads = net.backward(&trace, &upstream)?.grads;
    if let Some(L2Term { weight, scope }) = l2 {
        value += loss::l2_penalty(net, weight, scope)?;
        loss::add_l2_grad(net, weight, scope, &mut grads)?;
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mask = vec![true; net.num_slots()];
    opt.step(net, &grads, &mask)?;
    Ok(value)
}

/// Eval-mode `(mean cross-entropy, accuracy)` over a split.
pub fn evaluate_split(net: &Network, examples: &[Example]) -> Result<(f64, f64)> {
    let probs = eval::predict(net, examples)?;
    let labels = data::labels_of(examples, None);
    let ce = nn::cross_entropy(&probs, &labels)?;
    Ok((ce, eval::accuracy_from_probs(&probs, &labels)?))
}

/// Early-stopped Adam training of a fresh classifier built from `spec`.
pub fn fit_classifier(
    spec: &ClassifierSpec,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    seed: u64,
    l2: Option<L2Term>,
) -> Result<FitResult> {
    fit_on(spec.build(seed)?, &bundle.train, &bundle.validation, cfg, seed, l2)
}

/// As [`fit_classifier`] with explicit train/validation examples and a
/// starting network.
pub fn fit_on(
    mut net: Network,
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    l2: Option<L2Term>,
) -> Result<FitResult> {
    cfg.validate()?;
    if validation.is_empty() {
        return Err(Error::InsufficientData("validation split is empty".into()));
    }
    let mut opt = AdamState::new(&net, cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut total = 0.0;
        let batches = data::batches(train.len(), cfg.batch_size, seed, epoch)?;
        for (b, idx) in batches.iter().enumerate() {
            let x = data::features_tensor(train, Some(idx))?;
            let y = data::labels_of(train, Some(idx));
            let mode = Mode::Train {
                seed: dropout_seed(seed, epoch, b),
            };
            let l = classification_step(&mut net, &mut opt, &x, &y, mode, l2)
                .map_err(|e| annotate(e, epoch, b))?;
            total += l * idx.len() as f64;
        }
        let (val_ce, val_acc) = evaluate_split(&net, validation)?;
        history.push(EpochRecord {
            epoch,
            train_ce: total / train.len() as f64,
            val_ce,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
        if !stopper.observe(epoch, val_acc, &net) {
            break;
        }
    }
    let (model, best_epoch) = stopper.into_best().expect("at least one epoch ran");
    Ok(FitResult {
        model,
        best_epoch,
        history,
    })
}

pub(crate) fn annotate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {batch})")),
        other => other,
    }
}
