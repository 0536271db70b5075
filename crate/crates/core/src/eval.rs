//! Membership-inference evaluation: accuracy, rank-based AUC, the
//! loss-threshold and shadow-discriminator attacks, and the
//! accuracy-over-privacy score.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{self, Example};
use crate::discriminator::FrozenDiscriminator;
use crate::error::{Error, Result};
use crate::nn::{argmax, Mode, Network, Tensor};
use crate::shadow::PredictionRecord;

/// Eval-mode class probabilities for every example.
pub fn predict(net: &Network, examples: &[Example]) -> Result<Tensor> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("cannot predict on an empty split".into()));
    }
    net.forward(&data::features_tensor(examples, None)?, Mode::Eval)
}

pub fn accuracy_from_probs(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || probs.rows() != labels.len() {
        return Err(Error::shape("accuracy", labels.len(), probs.rows()));
    }
    let hits = probs
        .iter_rows()
        .zip(labels)
        .filter(|(r, &l)| argmax(r) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
pub fn accuracy(net: &Network, split: &[Example]) -> Result<f64> {
    let probs = predict(net, split)?;
    accuracy_from_probs(&probs, &data::labels_of(split, None))
}

/// ROC AUC via the Mann-Whitney statistic with midranks. Higher scores are
/// taken to mean "member"; tied pairs count one half.
pub fn auc(member_scores: &[f64], nonmember_scores: &[f64]) -> Result<f64> {
    if member_scores.is_empty() || nonmember_scores.is_empty() {
        return Err(Error::InvalidArgument("AUC needs at least one score on each side".into()));
    }
    if member_scores.iter().chain(nonmember_scores).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let mut all: Vec<(f64, bool)> = member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let m = member_scores.len() as f64;
    let n = nonmember_scores.len() as f64;
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    LossThreshold,
    ShadowDiscriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    All,
    Misclassified,
    Correct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub auc: f64,
    pub attack_kind: AttackKind,
    pub slice: Slice,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

/// An attack evaluated on the full population and on the two correctness
/// slices. A slice is `None` when either side of it is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub all: AttackResult,
    pub misclassified: Option<AttackResult>,
    pub correct: Option<AttackResult>,
    pub notices: Vec<String>,
}

impl AttackReport {
    pub fn slice(&self, slice: Slice) -> Option<&AttackResult> {
        match slice {
            Slice::All => Some(&self.all),
            Slice::Misclassified => self.misclassified.as_ref(),
            Slice::Correct => self.correct.as_ref(),
        }
    }
}

struct Scored {
    score: f64,
    correct: bool,
}

fn slice_result(kind: AttackKind, slice: Slice, members: &[Scored], nonmembers: &[Scored]) -> Result<Option<AttackResult>> {
    let keep = |s: &&Scored| match slice {
        Slice::All => true,
        Slice::Misclassified => !s.correct,
        Slice::Correct => s.correct,
    };
    let m: Vec<f64> = members.iter().filter(keep).map(|s| s.score).collect();
    let n: Vec<f64> = nonmembers.iter().filter(keep).map(|s| s.score).collect();
    if m.is_empty() || n.is_empty() {
        return Ok(None);
    }
    Ok(Some(AttackResult {
        auc: auc(&m, &n)?,
        attack_kind: kind,
        slice,
        n_members: m.len(),
        n_nonmembers: n.len(),
    }))
}

fn report(kind: AttackKind, members: &[Scored], nonmembers: &[Scored]) -> Result<AttackReport> {
    let all = slice_result(kind, Slice::All, members, nonmembers)?
        .ok_or_else(|| Error::InvalidArgument("attack needs non-empty member and non-member splits".into()))?;
    let mut notices = Vec::new();
    let misclassified = slice_result(kind, Slice::Misclassified, members, nonmembers)?;
    if misclassified.is_none() {
        notices.push("misclassified slice omitted: one side is empty".to_string());
    }
    let correct = slice_result(kind, Slice::Correct, members, nonmembers)?;
    if correct.is_none() {
        notices.push("correct slice omitted: one side is empty".to_string());
    }
    for n in &notices {
        log::info!("{kind:?} attack: {n}");
    }
    Ok(AttackReport {
        kind,
        all,
        misclassified,
        correct,
        notices,
    })
}

/// Prediction records (probabilities, label, loss) for every example.
pub fn records_for(net: &Network, examples: &[Example], membership: bool) -> Result<Vec<PredictionRecord>> {
    let probs = predict(net, examples)?;
    probs
        .iter_rows()
        .zip(examples)
        .map(|(p, e)| PredictionRecord::from_prediction(p, e.label, membership))
        .collect()
}

/// Scores each example by its negated cross-entropy, so lower loss reads as
/// more member-like.
pub fn loss_threshold_attack(net: &Network, members: &[Example], nonmembers: &[Example]) -> Result<AttackReport> {
    let score = |split: &[Example], m: bool| -> Result<Vec<Scored>> {
        Ok(records_for(net, split, m)?
            .into_iter()
            .map(|r| Scored {
                score: -r.loss,
                correct: !r.is_misclassified(),
            })
            .collect())
    };
    report(AttackKind::LossThreshold, &score(members, true)?, &score(nonmembers, false)?)
}

/// Scores each example with the frozen discriminator's membership
/// probability. Falls back to the loss-threshold attack (with a notice) when
/// the misclassified slice is empty on either side.
pub fn discriminator_attack(
    d: &FrozenDiscriminator,
    net: &Network,
    members: &[Example],
    nonmembers: &[Example],
) -> Result<AttackReport> {
    let score = |split: &[Example], m: bool| -> Result<Vec<Scored>> {
        let records = records_for(net, split, m)?;
        let scores = d.discriminate_records(&records)?;
        Ok(records
            .iter()
            .zip(scores)
            .map(|(r, s)| Scored {
                score: s,
                correct: !r.is_misclassified(),
            })
            .collect())
    };
    let (m, n) = (score(members, true)?, score(nonmembers, false)?);
    let has_miss = |v: &[Scored]| v.iter().any(|s| !s.correct);
    if !has_miss(&m) || !has_miss(&n) {
        let mut fallback = loss_threshold_attack(net, members, nonmembers)?;
        let notice = "no misclassified records on one side; fell back to the loss-threshold attack".to_string();
        log::warn!("{notice}");
        fallback.notices.insert(0, notice);
        return Ok(fallback);
    }
    report(AttackKind::ShadowDiscriminator, &m, &n)
}

/// `acc / (2 · max(auc, 0.5))^λ`.
pub fn aop(acc: f64, auc_mia: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&acc) || !(0.0..=1.0).contains(&auc_mia) || !(lambda >= 1.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "aop needs acc, auc in [0,1] and finite lambda >= 1; got ({acc}, {auc_mia}, {lambda})"
        )));
    }
    Ok(acc / (2.0 * auc_mia.max(0.5)).powf(lambda))
}

pub const AOP_LAMBDAS: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AopReport {
    pub acc: f64,
    pub auc_mia: f64,
    pub lambda: f64,
    pub aop: f64,
}

impl AopReport {
    pub fn new(acc: f64, auc_mia: f64, lambda: f64) -> Result<Self> {
        Ok(AopReport {
            acc,
            auc_mia,
            lambda,
            aop: aop(acc, auc_mia, lambda)?,
        })
    }
}

/// Mean cross-entropy of the records' labels; convenience for callers that
/// already hold records.
pub fn mean_loss(records: &[PredictionRecord]) -> f64 {
    records.iter().map(|r| r.loss).sum::<f64>() / records.len().max(1) as f64
}
