//! Residual membership discriminator over encoded prediction records.
//!
//! Topology: `Dense(2C+1 → w) → ReLU → [residual block] × n → Dense(w → 1) →
//! Sigmoid`, where each block is `relu(x + Dense(relu(Dense(x))))`. The loss
//! slot of the encoded record is divided by `ln C` before the first layer, at
//! training and at attack time alike.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{checkpoint, loss, AdamState, Dense, Layer, Mode, Network, ResidualBlock, Tensor};
use crate::seed;
use crate::shadow::{encode_record, AttackDataset, PredictionRecord};
use crate::train::{EarlyStopping, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub num_classes: usize,
    pub num_residual_blocks: usize,
    pub hidden_width: usize,
}

impl DiscriminatorSpec {
    pub fn new(num_classes: usize) -> Self {
        DiscriminatorSpec {
            num_classes,
            num_residual_blocks: 3,
            hidden_width: 64,
        }
    }

    pub fn with_width(mut self, w: usize) -> Self {
        self.hidden_width = w;
        self
    }

    pub fn with_blocks(mut self, n: usize) -> Self {
        self.num_residual_blocks = n;
        self
    }

    pub fn input_dim(&self) -> usize {
        2 * self.num_classes + 1
    }

    pub fn build(&self, seed: u64) -> Result<Discriminator> {
        if self.num_classes < 2 || self.num_residual_blocks == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidArgument(format!("invalid discriminator spec {self:?}")));
        }
        let mut rng = seed::rng(seed::derive(seed, &[seed::TAG_INIT]));
        let w = self.hidden_width;
        let mut layers = vec![Layer::Dense(Dense::init(self.input_dim(), w, &mut rng)), Layer::Relu];
        for _ in 0..self.num_residual_blocks {
            layers.push(Layer::Residual(ResidualBlock::init(w, &mut rng)));
        }
        layers.push(Layer::Dense(Dense::init(w, 1, &mut rng)));
        layers.push(Layer::Sigmoid);
        Ok(Discriminator {
            network: Network::new(layers)?,
            num_classes: self.num_classes,
        })
    }
}

/// A discriminator network together with its input preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    network: Network,
    num_classes: usize,
}

impl Discriminator {
    /// Wraps an arbitrary single-output network taking `2C + 1` inputs.
    pub fn from_network(network: Network, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("discriminator needs at least 2 classes".into()));
        }
        if network.input_dim() != 2 * num_classes + 1 || network.output_dim() != 1 {
            return Err(Error::shape(
                "discriminator network",
                format!("{} -> 1", 2 * num_classes + 1),
                format!("{} -> {}", network.input_dim(), network.output_dim()),
            ));
        }
        Ok(Discriminator { network, num_classes })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        2 * self.num_classes + 1
    }

    /// Multiplier applied to the loss slot, `1 / ln C`.
    pub fn loss_scale(&self) -> f64 {
        1.0 / (self.num_classes as f64).ln()
    }

    fn prepare(&self, encoded: &Tensor) -> Result<Tensor> {
        if encoded.shape().len() != 2 || encoded.cols() != self.input_dim() {
            return Err(Error::shape(
                "discriminator input",
                format!("[B, {}]", self.input_dim()),
                format!("{:?}", encoded.shape()),
            ));
        }
        let mut x = encoded.clone();
        let slot = 2 * self.num_classes;
        let k = self.loss_scale();
        for r in 0..x.rows() {
            x.row_mut(r)[slot] *= k;
        }
        Ok(x)
    }

    /// Raw sigmoid outputs (unclamped) for a batch of encoded records.
    pub fn forward(&self, encoded: &Tensor, mode: Mode) -> Result<Tensor> {
        self.network.forward(&self.prepare(encoded)?, mode)
    }
}

/// A trained discriminator whose parameters can no longer change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenDiscriminator {
    inner: Discriminator,
    /// Held-out AUC reached at the selected checkpoint, when both classes
    /// were present in the held-out slice.
    pub heldout_auc: Option<f64>,
}

impl FrozenDiscriminator {
    pub fn freeze(mut d: Discriminator, heldout_auc: Option<f64>) -> Self {
        d.network.freeze();
        FrozenDiscriminator { inner: d, heldout_auc }
    }

    pub fn network(&self) -> &Network {
        &self.inner.network
    }

    pub fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    pub fn loss_scale(&self) -> f64 {
        self.inner.loss_scale()
    }

    pub fn checksum(&self) -> String {
        self.inner.network.checksum()
    }

    /// Membership probability of one encoded record, clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn discriminate(&self, encoded: &[f64]) -> Result<f64> {
        let x = Tensor::new(vec![1, encoded.len()], encoded.to_vec())?;
        Ok(self.discriminate_batch(&x)?[0])
    }

    pub fn discriminate_batch(&self, encoded: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .inner
            .forward(encoded, Mode::Eval)?
            .data()
            .iter()
            .map(|&p| loss::clamp_prob(p))
            .collect())
    }

    pub fn discriminate_records(&self, records: &[PredictionRecord]) -> Result<Vec<f64>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        self.discriminate_batch(&encode_all(records)?)
    }

    /// Clamped outputs plus `∂L/∂encoded`. `dloss` maps each row's clamped
    /// output to `∂L/∂output`; rows whose output sits on the clamp get zero
    /// gradient. Parameters are untouched.
    pub fn input_gradient(&self, encoded: &Tensor, dloss: impl Fn(f64) -> f64) -> Result<(Vec<f64>, Tensor)> {
        let x = self.inner.prepare(encoded)?;
        let trace = self.inner.network.forward_traced(&x, Mode::Eval)?;
        let raw = trace.output().data().to_vec();
        let clamped: Vec<f64> = raw.iter().map(|&p| loss::clamp_prob(p)).collect();
        let up: Vec<f64> = raw
            .iter()
            .zip(&clamped)
            .map(|(&p, &s)| if p == s { dloss(s) } else { 0.0 })
            .collect();
        let back = self.inner.network.backward(&trace, &Tensor::new(vec![raw.len(), 1], up)?)?;
        let mut grad = back.input_grad;
        let slot = 2 * self.inner.num_classes;
        let k = self.inner.loss_scale();
        for r in 0..grad.rows() {
            grad.row_mut(r)[slot] *= k;
        }
        Ok((clamped, grad))
    }

    pub fn to_json(&self) -> Result<String> {
        checkpoint::to_json("discriminator", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut d: FrozenDiscriminator = checkpoint::from_json("discriminator", text)?;
        d.inner.network.freeze();
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&checkpoint::read_text(path)?)
    }
}

pub fn encode_all(records: &[PredictionRecord]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = records.iter().map(encode_record).collect();
    Tensor::from_rows(&rows)
}

fn weighted_targets(records: &[PredictionRecord], w_member: f64, w_non: f64) -> (Vec<f64>, Vec<f64>) {
    records
        .iter()
        .map(|r| if r.member { (1.0, w_member) } else { (0.0, w_non) })
        .unzip()
}

/// Splits off a stratified 20% held-out slice, trains with class-weighted
/// binary cross-entropy and Adam, keeps the checkpoint with the best
/// held-out AUC (or lowest held-out loss when the slice lacks a class), and
/// freezes it.
pub fn train_discriminator(
    ds: &AttackDataset,
    spec: &DiscriminatorSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FrozenDiscriminator> {
    ds.validate()?;
    cfg.validate()?;
    if spec.num_classes != ds.num_classes {
        return Err(Error::shape("discriminator classes", ds.num_classes, spec.num_classes));
    }
    let seed = seed::derive(seed, &[seed::TAG_DISCRIMINATOR]);
    let mut rng = seed::rng(seed);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for member in [true, false] {
        let mut group: Vec<&PredictionRecord> = ds.records.iter().filter(|r| r.member == member).collect();
        group.shuffle(&mut rng);
        let n_held = if group.len() >= 2 { ((group.len() as f64 * 0.2).round() as usize).max(1) } else { 0 };
        held.extend(group[..n_held].iter().map(|r| (*r).clone()));
        train.extend(group[n_held..].iter().map(|r| (*r).clone()));
    }
    let n_mem = train.iter().filter(|r| r.member).count() as f64;
    let n_non = train.len() as f64 - n_mem;
    let total = train.len() as f64;
    let (w_mem, w_non) = (total / (2.0 * n_mem), total / (2.0 * n_non));

    let mut d = spec.build(seed)?;
    let mut opt = AdamState::new(&d.network, cfg.adam());
    let mask = vec![true; d.network.num_slots()];
    let mut stopper = EarlyStopping::new(cfg.patience);
    let held_x = if held.is_empty() { None } else { Some(encode_all(&held)?) };
    let held_both = held.iter().any(|r| r.member) && held.iter().any(|r| !r.member);
    let mut best_auc = None;

    for epoch in 0..cfg.max_epochs {
        for (b, idx) in data::batches(train.len(), cfg.batch_size, seed, epoch)?.iter().enumerate() {
            let batch: Vec<PredictionRecord> = idx.iter().map(|&i| train[i].clone()).collect();
            let x = d.prepare(&encode_all(&batch)?)?;
            let (t, w) = weighted_targets(&batch, w_mem, w_non);
            let trace = d.network.forward_traced(&x, Mode::Eval)?;
            let l = loss::binary_cross_entropy(trace.output(), &t, &w)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("discriminator loss (epoch {epoch}, batch {b})")));
            }
            let up = loss::binary_cross_entropy_grad(trace.output(), &t, &w)?;
            let grads = d.network.backward(&trace, &up)?.grads;
            opt.step(&mut d.network, &grads, &mask)?;
        }
        let (metric, auc_now) = match &held_x {
            Some(hx) => {
                let out = d.forward(hx, Mode::Eval)?;
                if held_both {
                    let (m, n): (Vec<_>, Vec<_>) = held.iter().zip(out.data()).partition(|(r, _)| r.member);
                    let m: Vec<f64> = m.into_iter().map(|(_, s)| *s).collect();
                    let n: Vec<f64> = n.into_iter().map(|(_, s)| *s).collect();
                    let a = eval::auc(&m, &n)?;
                    (a, Some(a))
                } else {
                    let (t, w) = weighted_targets(&held, w_mem, w_non);
                    (-loss::binary_cross_entropy(&out, &t, &w)?, None)
                }
            }
            None => {
                let out = d.forward(&encode_all(&train)?, Mode::Eval)?;
                let (t, w) = weighted_targets(&train, w_mem, w_non);
                (-loss::binary_cross_entropy(&out, &t, &w)?, None)
            }
        };
        let keep_going = stopper.observe(epoch, metric, &d.network);
        if stopper.best_epoch() == epoch {
            best_auc = auc_now;
        }
        if !keep_going {
            break;
        }
    }
    let (network, _) = stopper.into_best().expect("at least one epoch ran");
    d.network = network;
    Ok(FrozenDiscriminator::freeze(d, best_auc))
}
