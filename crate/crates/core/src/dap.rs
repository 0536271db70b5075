//! Adversarial classifier training against a frozen membership discriminator.
//!
//! Every batch runs two masked passes that share one Adam state:
//!
//! 1. cross-entropy over all trainable layers;
//! 2. `β · mean(−ln(1 − D(record)))` over the batch's misclassified outputs,
//!    applied to the last dense layer only. Descending this term drives the
//!    discriminator's output on training records toward "non-member".
//!
//! `β` is 1 in the first epoch and afterwards
//! `r · val_ce / max(val_adv, 1e-8)` from the previous epoch's validation
//! losses.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetBundle, Example};
use crate::discriminator::{train_discriminator, DiscriminatorSpec, FrozenDiscriminator};
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{argmax, loss, AdamState, ClassifierSpec, Mode, Network, Tensor};
use crate::seed;
use crate::shadow::{filter_misclassified, train_shadows, AttackDataset, ShadowSource};
use crate::train::{self, EarlyStopping, TrainConfig};

/// Lower bound on the validation adversarial loss in the β ratio.
pub const BETA_GUARD: f64 = 1e-8;

/// Which split the shadow models are trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DapMode {
    #[serde(rename = "dap_t")]
    DapT,
    #[serde(rename = "dap_v")]
    DapV,
}

impl DapMode {
    pub fn name(self) -> &'static str {
        match self {
            DapMode::DapT => "dap_t",
            DapMode::DapV => "dap_v",
        }
    }

    pub fn shadow_source(self) -> ShadowSource {
        match self {
            DapMode::DapT => ShadowSource::TestSet,
            DapMode::DapV => ShadowSource::ValidationSet,
        }
    }

    pub fn pool(self, bundle: &DatasetBundle) -> &[Example] {
        match self {
            DapMode::DapT => &bundle.test,
            DapMode::DapV => &bundle.validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DapConfig {
    /// Discriminator weight in `[0, 1]`.
    pub r: f64,
    pub mode: DapMode,
    #[serde(default)]
    pub train: TrainConfig,
}

impl DapConfig {
    pub fn new(r: f64, mode: DapMode) -> Self {
        DapConfig {
            r,
            mode,
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::InvalidArgument(format!("r must lie in [0, 1], got {}", self.r)));
        }
        self.train.validate()
    }
}

/// `1` at `t = 0`, otherwise `r · ce / max(adv, 1e-8)`.
pub fn compute_beta(prev_val_ce: f64, prev_val_adv: f64, r: f64, t: usize) -> Result<f64> {
    if t == 0 {
        return Ok(1.0);
    }
    for (name, v) in [("validation ce", prev_val_ce), ("validation adversarial loss", prev_val_adv), ("r", r)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!("{name} must be a non-negative number, got {v}")));
        }
    }
    if prev_val_adv < BETA_GUARD && r > 0.0 {
        log::warn!("validation adversarial loss {prev_val_adv} below {BETA_GUARD}; clamping the beta denominator");
    }
    Ok(prev_val_ce / prev_val_adv.max(BETA_GUARD) * r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaState {
    pub t: usize,
    pub beta: f64,
    pub prev_val_ce: Option<f64>,
    pub prev_val_adv: Option<f64>,
}

impl BetaState {
    pub fn initial() -> Self {
        BetaState {
            t: 0,
            beta: 1.0,
            prev_val_ce: None,
            prev_val_adv: None,
        }
    }

    pub fn advance(&self, val_ce: f64, val_adv: f64, r: f64) -> Result<BetaState> {
        let t = self.t + 1;
        Ok(BetaState {
            t,
            beta: compute_beta(val_ce, val_adv, r, t)?,
            prev_val_ce: Some(val_ce),
            prev_val_adv: Some(val_adv),
        })
    }
}

/// Rows of `probs` whose argmax misses the label, with their encodings.
fn misclassified_rows(probs: &Tensor, labels: &[usize]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if probs.rows() != labels.len() {
        return Err(Error::shape("labels", probs.rows(), labels.len()));
    }
    let c = probs.cols();
    let mut rows = Vec::new();
    let mut encoded = Vec::new();
    for (i, (p, &y)) in probs.iter_rows().zip(labels).enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, num_classes: c });
        }
        if argmax(p) != y {
            let mut e = Vec::with_capacity(2 * c + 1);
            e.extend_from_slice(p);
            e.extend((0..c).map(|j| if j == y { 1.0 } else { 0.0 }));
            e.push(loss::example_cross_entropy(p, y));
            rows.push(i);
            encoded.push(e);
        }
    }
    Ok((rows, encoded))
}

/// Mean of `−ln(1 − D(record))` over the misclassified rows; 0 when there
/// are none.
pub fn adversarial_term(d: &FrozenDiscriminator, probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, encoded) = misclassified_rows(probs, labels)?;
    if rows.is_empty() {
        return Ok(0.0);
    }
    let s = d.discriminate_batch(&Tensor::from_rows(&encoded)?)?;
    Ok(s.iter().map(|v| -(1.0 - v).ln()).sum::<f64>() / s.len() as f64)
}

/// Value of [`adversarial_term`] together with its gradient with respect to
/// `probs`, and the number of misclassified rows.
pub fn adversarial_grad(d: &FrozenDiscriminator, probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, usize)> {
    let (rows, encoded) = misclassified_rows(probs, labels)?;
    let mut dp = Tensor::zeros(probs.shape());
    if rows.is_empty() {
        return Ok((0.0, dp, 0));
    }
    let m = rows.len() as f64;
    let (s, de) = d.input_gradient(&Tensor::from_rows(&encoded)?, |s| 1.0 / (m * (1.0 - s)))?;
    let value = s.iter().map(|v| -(1.0 - v).ln()).sum::<f64>() / m;
    let c = probs.cols();
    for (k, &i) in rows.iter().enumerate() {
        let g = de.row(k);
        let y = labels[i];
        let p_y = probs.row(i)[y];
        let out = dp.row_mut(i);
        out.copy_from_slice(&g[..c]);
        if (loss::PROB_EPS..=1.0 - loss::PROB_EPS).contains(&p_y) {
            out[y] -= g[2 * c] / p_y;
        }
    }
    Ok((value, dp, rows.len()))
}

/// Which of the two per-batch passes an epoch runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPlan {
    pub classification: bool,
    pub adversarial: bool,
}

impl Default for EpochPlan {
    fn default() -> Self {
        EpochPlan {
            classification: true,
            adversarial: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Example-weighted mean batch cross-entropy.
    pub train_ce: f64,
    /// Example-weighted mean batch adversarial term.
    pub train_adv: f64,
    pub adversarial_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DapEpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub train_ce: f64,
    pub val_ce: f64,
    pub val_adv: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

/// Eval-mode `(ce, adversarial term, accuracy)` over a split.
pub fn validation_metrics(net: &Network, d: &FrozenDiscriminator, examples: &[Example]) -> Result<(f64, f64, f64)> {
    let probs = eval::predict(net, examples)?;
    let labels = data::labels_of(examples, None);
    Ok((
        loss::cross_entropy(&probs, &labels)?,
        adversarial_term(d, &probs, &labels)?,
        eval::accuracy_from_probs(&probs, &labels)?,
    ))
}

/// Classifier, optimizer and discriminator for one adversarial run.
pub struct DapTrainer<'a> {
    net: Network,
    opt: AdamState,
    d: &'a FrozenDiscriminator,
    r: f64,
    cfg: TrainConfig,
    seed: u64,
}

impl<'a> DapTrainer<'a> {
    pub fn new(net: Network, d: &'a FrozenDiscriminator, r: f64, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !net.is_classifier() {
            return Err(Error::InvalidArgument("adversarial training needs a softmax classifier".into()));
        }
        if net.output_dim() != d.num_classes() {
            return Err(Error::shape("discriminator classes", net.output_dim(), d.num_classes()));
        }
        let opt = AdamState::new(&net, cfg.adam());
        Ok(DapTrainer {
            net,
            opt,
            d,
            r,
            cfg: cfg.clone(),
            seed,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    /// One pass over `train`. The adversarial pass is skipped when the plan
    /// excludes it, when `r` or `beta` is 0, and on batches without
    /// misclassified outputs.
    pub fn train_epoch(&mut self, train: &[Example], beta: f64, epoch: usize, plan: EpochPlan) -> Result<EpochStats> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta must be finite and non-negative, got {beta}")));
        }
        let adversarial = plan.adversarial && self.r > 0.0 && beta > 0.0;
        let last = self.net.last_dense_mask();
        let (mut ce_total, mut adv_total, mut steps) = (0.0, 0.0, 0);
        for (b, idx) in data::batches(train.len(), self.cfg.batch_size, self.seed, epoch)?.iter().enumerate() {
            let x = data::features_tensor(train, Some(idx))?;
            let y = data::labels_of(train, Some(idx));
            let mode = Mode::Train {
                seed: train::dropout_seed(self.seed, epoch, b),
            };
            let ce = if plan.classification {
                train::classification_step(&mut self.net, &mut self.opt, &x, &y, mode, None)
            } else {
                loss::cross_entropy(&self.net.forward(&x, mode)?, &y)
            }
            .map_err(|e| train::annotate(e, epoch, b))?;
            ce_total += ce * idx.len() as f64;
            if !adversarial {
                continue;
            }
            let trace = self.net.forward_traced(&x, mode)?;
            let (value, mut dp, n_miss) = adversarial_grad(self.d, trace.output(), &y)?;
            if n_miss == 0 {
                continue;
            }
            if !value.is_finite() {
                return Err(train::annotate(Error::NonFinite("adversarial loss".into()), epoch, b));
            }
            adv_total += value * idx.len() as f64;
            dp.scale_in_place(beta);
            let grads = self.net.backward(&trace, &dp)?.grads;
            self.opt
                .step(&mut self.net, &grads, &last)
                .map_err(|e| train::annotate(e, epoch, b))?;
            steps += 1;
        }
        let n = train.len() as f64;
        Ok(EpochStats {
            train_ce: ce_total / n,
            train_adv: adv_total / n,
            adversarial_steps: steps,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DapFitResult {
    /// Checkpoint with the best validation accuracy.
    pub model: Network,
    pub best_epoch: usize,
    pub history: Vec<DapEpochRecord>,
}

impl DapFitResult {
    pub fn seconds_per_epoch(&self) -> f64 {
        train::mean_seconds(self.history.iter().map(|h| h.seconds))
    }
}

/// Adversarial training of a fresh classifier built from `spec` with `seed`,
/// early-stopped on validation accuracy. With `r = 0` the result matches
/// [`train::fit_classifier`] bit for bit.
pub fn dap_fit(
    spec: &ClassifierSpec,
    bundle: &DatasetBundle,
    d: &FrozenDiscriminator,
    r: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<DapFitResult> {
    dap_fit_on(spec.build(seed)?, &bundle.train, &bundle.validation, d, r, cfg, seed)
}

pub fn dap_fit_on(
    net: Network,
    train: &[Example],
    validation: &[Example],
    d: &FrozenDiscriminator,
    r: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<DapFitResult> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!("r must lie in [0, 1], got {r}")));
    }
    if validation.is_empty() {
        return Err(Error::InsufficientData("validation split is empty".into()));
    }
    let mut trainer = DapTrainer::new(net, d, r, cfg, seed)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut beta = BetaState::initial();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let stats = trainer.train_epoch(train, beta.beta, epoch, EpochPlan::default())?;
        let (val_ce, val_adv, val_acc) = validation_metrics(trainer.network(), d, validation)?;
        history.push(DapEpochRecord {
            epoch,
            beta: beta.beta,
            train_ce: stats.train_ce,
            val_ce,
            val_adv,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!(
            "dap epoch {epoch}: beta {:.4} train_ce {:.4} val_ce {val_ce:.4} val_adv {val_adv:.4} val_acc {val_acc:.4}",
            beta.beta,
            stats.train_ce
        );
        if !stopper.observe(epoch, val_acc, trainer.network()) {
            break;
        }
        beta = beta.advance(val_ce, val_adv, r)?;
    }
    let (model, best_epoch) = stopper.into_best().expect("at least one epoch ran");
    Ok(DapFitResult {
        model,
        best_epoch,
        history,
    })
}

pub const HISTORY_HEADER: [&str; 6] = ["epoch", "beta", "train_ce", "val_ce", "val_adv", "val_acc"];

pub fn write_history_csv<W: Write>(history: &[DapEpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.beta.to_string(),
            h.train_ce.to_string(),
            h.val_ce.to_string(),
            h.val_adv.to_string(),
            h.val_acc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("history csv", e))?;
    Ok(())
}

pub fn save_history_csv(history: &[DapEpochRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_history_csv(history, f)
}

/// Settings for the attack model stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSetup {
    pub num_shadows: usize,
    pub shadow_train: TrainConfig,
    pub discriminator_width: usize,
    pub discriminator_blocks: usize,
    pub discriminator_train: TrainConfig,
}

impl Default for AttackSetup {
    fn default() -> Self {
        AttackSetup {
            num_shadows: 10,
            shadow_train: TrainConfig::default(),
            discriminator_width: 64,
            discriminator_blocks: 3,
            discriminator_train: TrainConfig::default(),
        }
    }
}

/// Shadows on the mode's split, misclassified filter, discriminator training.
pub fn build_discriminator(
    spec: &ClassifierSpec,
    bundle: &DatasetBundle,
    mode: DapMode,
    setup: &AttackSetup,
    seed: u64,
) -> Result<(FrozenDiscriminator, AttackDataset)> {
    let run = train_shadows(mode.pool(bundle), setup.num_shadows, spec, &setup.shadow_train, seed)?;
    let ds = filter_misclassified(run.records.iter().map(|r| &r.record), bundle.num_classes, mode.shadow_source())?;
    let (members, nonmembers) = ds.counts();
    log::info!("attack dataset: {members} member and {nonmembers} non-member misclassified records");
    let dspec = DiscriminatorSpec::new(bundle.num_classes)
        .with_width(setup.discriminator_width)
        .with_blocks(setup.discriminator_blocks);
    let d = train_discriminator(&ds, &dspec, &setup.discriminator_train, seed)?;
    if let Some(a) = d.heldout_auc {
        log::info!("discriminator held-out auc {a:.4}");
    }
    Ok((d, ds))
}

#[derive(Debug, Clone)]
pub struct DapRun {
    pub fit: DapFitResult,
    pub discriminator: FrozenDiscriminator,
    pub attack_dataset: AttackDataset,
    /// Discriminator checksum before and after adversarial training.
    pub checksums: (String, String),
}

/// Full pipeline from a master seed. The classifier is built with
/// `derive(seed, [TAG_CLASSIFIER])`, the same seed the harness gives the
/// undefended baseline.
pub fn run_dap(
    spec: &ClassifierSpec,
    bundle: &DatasetBundle,
    cfg: &DapConfig,
    setup: &AttackSetup,
    seed: u64,
) -> Result<DapRun> {
    cfg.validate()?;
    let (d, ds) = build_discriminator(spec, bundle, cfg.mode, setup, seed)?;
    let before = d.checksum();
    let fit = dap_fit(spec, bundle, &d, cfg.r, &cfg.train, seed::derive(seed, &[seed::TAG_CLASSIFIER]))?;
    let after = d.checksum();
    Ok(DapRun {
        fit,
        discriminator: d,
        attack_dataset: ds,
        checksums: (before, after),
    })
}
