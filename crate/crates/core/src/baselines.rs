//! Comparison trainers: undefended, dropout + l2, and DP-SGD.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetBundle};
use crate::error::{Error, Result};
use crate::nn::{loss, AdamState, ClassifierSpec, Gradients, L2Scope, Mode, Network, Tensor};
use crate::seed;
use crate::train::{self, EpochRecord, FitResult, L2Term, TrainConfig};

/// Early-stopped Adam training with no defense.
pub fn fit_plain(spec: &ClassifierSpec, bundle: &DatasetBundle, cfg: &TrainConfig, seed: u64) -> Result<FitResult> {
    train::fit_classifier(spec, bundle, cfg, seed, None)
}

pub const DROPOUT_GRID: [f64; 3] = [0.2, 0.33, 0.5];
pub const L2_GRID: [f64; 3] = [0.1, 0.01, 0.001];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub dropout_p: f64,
    pub l2_weight: f64,
}

impl RegConfig {
    /// Only values on the tuning grids are accepted.
    pub fn new(dropout_p: f64, l2_weight: f64) -> Result<Self> {
        let cfg = RegConfig { dropout_p, l2_weight };
        cfg.validate()?;
        Ok(cfg)
    }

    /// No dropout and no penalty. Trains exactly like [`fit_plain`].
    pub fn disabled() -> Self {
        RegConfig {
            dropout_p: 0.0,
            l2_weight: 0.0,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.dropout_p == 0.0 && self.l2_weight == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_disabled() || (DROPOUT_GRID.contains(&self.dropout_p) && L2_GRID.contains(&self.l2_weight)) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "regularisation {self:?} is off the grids {DROPOUT_GRID:?} x {L2_GRID:?}"
            )))
        }
    }

    /// The nine grid points.
    pub fn grid() -> Vec<RegConfig> {
        DROPOUT_GRID
            .iter()
            .flat_map(|&p| L2_GRID.iter().map(move |&w| RegConfig { dropout_p: p, l2_weight: w }))
            .collect()
    }
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            dropout_p: 0.5,
            l2_weight: 0.01,
        }
    }
}

/// Dropout after every hidden layer and an l2 penalty on the last dense
/// kernel.
pub fn fit_regularized(
    spec: &ClassifierSpec,
    bundle: &DatasetBundle,
    reg: &RegConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FitResult> {
    reg.validate()?;
    let spec = spec.clone().with_dropout(reg.dropout_p);
    let l2 = (reg.l2_weight > 0.0).then_some(L2Term {
        weight: reg.l2_weight,
        scope: L2Scope::LastDense,
    });
    train::fit_classifier(&spec, bundle, cfg, seed, l2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    /// Target budget. Only used to pick the epoch count through
    /// [`DpConfig::for_budget`]; the reported ε comes from the accountant.
    pub epsilon: f64,
    pub delta: f64,
    /// Per-example global-norm bound. `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            epsilon: 1.0,
            delta: 1e-5,
            clip_norm: 1.0,
            noise_multiplier: 1.1,
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return bad(format!("noise multiplier must be finite and non-negative, got {}", self.noise_multiplier));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return bad(format!("invalid dp schedule {self:?}"));
        }
        Ok(())
    }

    /// Sets `epochs` to the largest count whose accountant ε stays within
    /// `epsilon` for a training split of `n_train` examples.
    pub fn for_budget(mut self, epsilon: f64, n_train: usize) -> Result<Self> {
        self.epsilon = epsilon;
        self.validate()?;
        self.epochs = epochs_for_budget(epsilon, self.noise_multiplier, n_train, self.batch_size, self.delta)?;
        Ok(self)
    }

    pub fn sampling_rate(&self, n_train: usize) -> f64 {
        (self.batch_size as f64 / n_train as f64).min(1.0)
    }
}

/// Clips each flat per-example gradient to global norm `clip_norm`, sums,
/// adds `N(0, (σ·C)²)` per coordinate and divides by the batch size.
/// Returns the noisy mean and the post-clip norms.
pub fn privatize<R: Rng>(
    per_example: &[Vec<f64>],
    clip_norm: f64,
    noise_multiplier: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(clip_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("clip norm must be positive, got {clip_norm}")));
    }
    if !(noise_multiplier >= 0.0) || !noise_multiplier.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid noise multiplier {noise_multiplier}")));
    }
    let Some(first) = per_example.first() else {
        return Err(Error::InsufficientData("empty batch".into()));
    };
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    let mut norms = Vec::with_capacity(per_example.len());
    for g in per_example {
        if g.len() != dim {
            return Err(Error::shape("per-example gradient", dim, g.len()));
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        let mut clipped_sq = 0.0;
        for (s, v) in sum.iter_mut().zip(g) {
            let c = v * scale;
            clipped_sq += c * c;
            *s += c;
        }
        norms.push(clipped_sq.sqrt());
    }
    if noise_multiplier > 0.0 {
        let normal = Normal::new(0.0, noise_multiplier * clip_norm)
            .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
        for s in &mut sum {
            *s += normal.sample(rng);
        }
    }
    let b = per_example.len() as f64;
    Ok((sum.into_iter().map(|v| v / b).collect(), norms))
}

/// [`privatize`] over structured gradients.
pub fn dp_sgd_step<R: Rng>(
    per_example: &[Gradients],
    clip_norm: f64,
    noise_multiplier: f64,
    rng: &mut R,
) -> Result<(Gradients, Vec<f64>)> {
    let Some(first) = per_example.first() else {
        return Err(Error::InsufficientData("empty batch".into()));
    };
    let flat: Vec<Vec<f64>> = per_example.iter().map(Gradients::flatten).collect();
    let (mean, norms) = privatize(&flat, clip_norm, noise_multiplier, rng)?;
    let mut out = first.clone();
    for (o, v) in out.iter_values_mut().zip(mean) {
        *o = v;
    }
    Ok((out, norms))
}

/// Loose `(ε, δ)` bound: per-step Gaussian mechanism with subsampling
/// amplification `q`, composed with the advanced composition theorem.
/// `σ = 0` gives `f64::INFINITY`.
pub fn naive_epsilon_accountant(noise_multiplier: f64, steps: usize, sampling_rate: f64, delta: f64) -> Result<f64> {
    if !(noise_multiplier >= 0.0) || steps == 0 || !(sampling_rate > 0.0 && sampling_rate <= 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "accountant needs sigma >= 0, T >= 1, q in (0, 1], delta in (0, 1); got {noise_multiplier}, {steps}, {sampling_rate}, {delta}"
        )));
    }
    if noise_multiplier == 0.0 {
        return Ok(f64::INFINITY);
    }
    let step = sampling_rate * (2.0 * (1.25 / delta).ln()).sqrt() / noise_multiplier;
    let t = steps as f64;
    Ok(step * (2.0 * t * (1.0 / delta).ln()).sqrt() + t * step * (step.exp() - 1.0))
}

fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

/// Largest epoch count whose accountant ε does not exceed `epsilon`.
pub fn epochs_for_budget(epsilon: f64, noise_multiplier: f64, n_train: usize, batch_size: usize, delta: f64) -> Result<usize> {
    if n_train == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("empty training split or zero batch size".into()));
    }
    let q = (batch_size as f64 / n_train as f64).min(1.0);
    let per = steps_per_epoch(n_train, batch_size);
    let eps = |e: usize| naive_epsilon_accountant(noise_multiplier, e * per, q, delta);
    if eps(1)? > epsilon {
        return Err(Error::InvalidArgument(format!(
            "a single epoch already exceeds epsilon {epsilon} at sigma {noise_multiplier}"
        )));
    }
    let mut hi = 1;
    while eps(hi * 2)? <= epsilon {
        hi *= 2;
        if hi > 1 << 20 {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} allows unbounded training")));
        }
    }
    let (mut lo, mut hi) = (hi, hi * 2);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if eps(mid)? <= epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone)]
pub struct DpFitResult {
    /// Model after the last epoch.
    pub model: Network,
    pub history: Vec<EpochRecord>,
    /// Accountant ε for the steps actually taken.
    pub epsilon: f64,
    pub steps: usize,
    /// Largest post-clip per-example norm of each step.
    pub max_clipped_norms: Vec<f64>,
}

impl DpFitResult {
    pub fn seconds_per_epoch(&self) -> f64 {
        train::mean_seconds(self.history.iter().map(|h| h.seconds))
    }
}

/// Per-example gradients of the cross-entropy, by batch-of-one replay.
pub fn per_example_gradients(net: &Network, x: &Tensor, labels: &[usize], mode_seed: Option<u64>) -> Result<Vec<Gradients>> {
    (0..x.rows())
        .map(|i| {
            let xi = x.select_rows(&[i]);
            let mode = match mode_seed {
                Some(s) => Mode::Train {
                    seed: seed::derive(s, &[i as u64]),
                },
                None => Mode::Eval,
            };
            let trace = net.forward_traced(&xi, mode)?;
            let up = loss::cross_entropy_grad(trace.output(), &labels[i..=i])?;
            Ok(net.backward(&trace, &up)?.grads)
        })
        .collect()
}

/// DP-SGD with Adam applied to the privatised gradient, for a fixed number
/// of epochs.
pub fn fit_dp(spec: &ClassifierSpec, bundle: &DatasetBundle, dp: &DpConfig, seed: u64) -> Result<DpFitResult> {
    dp.validate()?;
    let train_set = &bundle.train;
    if train_set.is_empty() {
        return Err(Error::InsufficientData("training split is empty".into()));
    }
    let mut net = spec.build(seed)?;
    let cfg = TrainConfig {
        lr: dp.lr,
        batch_size: dp.batch_size,
        ..TrainConfig::default()
    };
    let mut opt = AdamState::new(&net, cfg.adam());
    let mask = vec![true; net.num_slots()];
    let mut noise = seed::rng(seed::derive(seed, &[seed::TAG_NOISE]));
    let mut history = Vec::with_capacity(dp.epochs);
    let mut max_norms = Vec::new();
    for epoch in 0..dp.epochs {
        let started = Instant::now();
        let mut total = 0.0;
        for (b, idx) in data::batches(train_set.len(), dp.batch_size, seed, epoch)?.iter().enumerate() {
            let x = data::features_tensor(train_set, Some(idx))?;
            let y = data::labels_of(train_set, Some(idx));
            let per = per_example_gradients(&net, &x, &y, Some(train::dropout_seed(seed, epoch, b)))?;
            let (g, norms) = dp_sgd_step(&per, dp.clip_norm, dp.noise_multiplier, &mut noise)?;
            max_norms.push(norms.iter().cloned().fold(0.0, f64::max));
            total += loss::cross_entropy(&net.forward(&x, Mode::Eval)?, &y)? * idx.len() as f64;
            opt.step(&mut net, &g, &mask).map_err(|e| train::annotate(e, epoch, b))?;
        }
        let (val_ce, val_acc) = train::evaluate_split(&net, &bundle.validation)?;
        history.push(EpochRecord {
            epoch,
            train_ce: total / train_set.len() as f64,
            val_ce,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let steps = max_norms.len();
    let epsilon = naive_epsilon_accountant(dp.noise_multiplier, steps, dp.sampling_rate(train_set.len()), dp.delta)?;
    Ok(DpFitResult {
        model: net,
        history,
        epsilon,
        steps,
        max_clipped_norms: max_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_example() {
        let mut rng = seed::rng(0);
        let (g, norms) = privatize(&[vec![3.0, 4.0], vec![0.3, 0.4]], 1.0, 0.0, &mut rng).unwrap();
        assert!((g[0] - 0.45).abs() < 1e-15 && (g[1] - 0.6).abs() < 1e-15);
        assert!((norms[0] - 1.0).abs() < 1e-15);
        assert!((norms[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn clip_norm_must_be_positive() {
        let mut rng = seed::rng(0);
        assert!(privatize(&[vec![1.0]], 0.0, 0.0, &mut rng).is_err());
        assert!(privatize(&[vec![1.0]], -1.0, 0.0, &mut rng).is_err());
        let (g, _) = privatize(&[vec![30.0, 40.0]], f64::INFINITY, 0.0, &mut rng).unwrap();
        assert_eq!(g, vec![30.0, 40.0]);
    }

    #[test]
    fn accountant_hand_value() {
        let sigma = (2.0 * (1.25e5f64).ln()).sqrt();
        let eps = naive_epsilon_accountant(sigma, 1, 1.0, 1e-5).unwrap();
        let hand = (2.0 * (1e5f64).ln()).sqrt() + (std::f64::consts::E - 1.0);
        assert!((eps - hand).abs() < 1e-12);
        assert!((eps - 6.515).abs() < 0.01);
        assert_eq!(naive_epsilon_accountant(0.0, 5, 0.1, 1e-5).unwrap(), f64::INFINITY);
    }

    #[test]
    fn reg_grid_enforced() {
        assert!(RegConfig::new(0.33, 0.01).is_ok());
        assert!(RegConfig::new(0.3, 0.01).is_err());
        assert!(RegConfig::new(0.5, 0.05).is_err());
        assert_eq!(RegConfig::grid().len(), 9);
        assert!(RegConfig::disabled().validate().is_ok());
    }

    #[test]
    fn budget_epochs_respect_epsilon() {
        let e = epochs_for_budget(4.0, 4.0, 600, 32, 1e-5).unwrap();
        assert!(e > 1);
        let q = 32.0 / 600.0;
        let per = 600usize.div_ceil(32);
        assert!(naive_epsilon_accountant(4.0, e * per, q, 1e-5).unwrap() <= 4.0);
        assert!(naive_epsilon_accountant(4.0, (e + 1) * per, q, 1e-5).unwrap() > 4.0);
    }
}
