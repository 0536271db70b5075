//! Loss functions and their gradients with respect to network outputs.
//!
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before every log;
//! the clamp's derivative is zero outside that interval.

use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn clamp_slope(p: f64) -> f64 {
    if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        1.0
    } else {
        0.0
    }
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if probs.shape().len() != 2 || probs.rows() != labels.len() {
        return Err(Error::shape("cross_entropy", format!("[{}, C]", labels.len()), format!("{:?}", probs.shape())));
    }
    let c = probs.cols();
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, num_classes: c });
    }
    Ok(())
}

/// `-ln p[label]` after clamping, for one probability row.
pub fn example_cross_entropy(row: &[f64], label: usize) -> f64 {
    -clamp_prob(row[label]).ln()
}

pub fn per_example_cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(probs, labels)?;
    Ok(probs
        .iter_rows()
        .zip(labels)
        .map(|(r, &l)| example_cross_entropy(r, l))
        .collect())
}

/// Mean categorical cross-entropy over the batch.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let per = per_example_cross_entropy(probs, labels)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to `probs`.
pub fn cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check_labels(probs, labels)?;
    let n = labels.len() as f64;
    let mut g = Tensor::zeros(probs.shape());
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.row(i)[l];
        g.row_mut(i)[l] = -clamp_slope(p) / (clamp_prob(p) * n);
    }
    Ok(g)
}

/// Weighted mean binary cross-entropy for a `[B, 1]` probability column.
/// `weights` are normalised by their sum.
pub fn binary_cross_entropy(probs: &Tensor, targets: &[f64], weights: &[f64]) -> Result<f64> {
    check_binary(probs, targets, weights)?;
    let wsum: f64 = weights.iter().sum();
    let mut total = 0.0;
    for ((&p, &t), &w) in probs.data().iter().zip(targets).zip(weights) {
        let p = clamp_prob(p);
        total += w * -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    }
    Ok(total / wsum)
}

pub fn binary_cross_entropy_grad(probs: &Tensor, targets: &[f64], weights: &[f64]) -> Result<Tensor> {
    check_binary(probs, targets, weights)?;
    let wsum: f64 = weights.iter().sum();
    let data = probs
        .data()
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((&p, &t), &w)| {
            let s = clamp_slope(p);
            let p = clamp_prob(p);
            s * w * (-(t / p) + (1.0 - t) / (1.0 - p)) / wsum
        })
        .collect();
    Ok(Tensor::from_raw(probs.shape().to_vec(), data))
}

fn check_binary(probs: &Tensor, targets: &[f64], weights: &[f64]) -> Result<()> {
    if probs.cols() != 1 || probs.rows() != targets.len() || targets.len() != weights.len() {
        return Err(Error::shape(
            "binary_cross_entropy",
            format!("[{}, 1] with matching weights", targets.len()),
            format!("{:?} / {} weights", probs.shape(), weights.len()),
        ));
    }
    if weights.iter().any(|&w| w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidArgument("BCE weights must be non-negative with positive sum".into()));
    }
    Ok(())
}

/// Which dense kernels an l2 penalty covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2Scope {
    AllKernels,
    LastDense,
}

fn l2_slots(net: &Network, scope: L2Scope) -> Vec<usize> {
    match scope {
        L2Scope::AllKernels => (0..net.num_slots()).collect(),
        L2Scope::LastDense => vec![net.last_dense_index()],
    }
}

/// `weight · Σ kernel²` over the selected kernels; biases are not penalised.
pub fn l2_penalty(net: &Network, weight: f64, scope: L2Scope) -> Result<f64> {
    if !(weight >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 weight must be >= 0, got {weight}")));
    }
    let slots = net.dense_slots();
    Ok(weight * l2_slots(net, scope).into_iter().map(|i| slots[i].kernel.sum_sq()).sum::<f64>())
}

/// Adds `2 · weight · kernel` to the matching gradient slots.
pub fn add_l2_grad(net: &Network, weight: f64, scope: L2Scope, grads: &mut super::network::Gradients) -> Result<()> {
    if !(weight >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 weight must be >= 0, got {weight}")));
    }
    if weight == 0.0 {
        return Ok(());
    }
    let slots = net.dense_slots();
    for i in l2_slots(net, scope) {
        grads.slots[i].kernel.add_scaled(&slots[i].kernel, 2.0 * weight);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Dense, Layer};

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let ce = cross_entropy(&probs(&[&[1.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(ce >= 0.0 && ce <= 1.2e-7, "{ce}");
    }

    #[test]
    fn uniform_probs_give_ln_c() {
        let ce = cross_entropy(&probs(&[&[0.25; 4]]), &[3]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!((ce - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn direct_evaluation() {
        let ce = cross_entropy(&probs(&[&[0.5, 0.25, 0.25]]), &[1]).unwrap();
        assert!((ce - -(0.25f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let err = cross_entropy(&probs(&[&[0.5, 0.5]]), &[2]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, num_classes: 2 }));
    }

    #[test]
    fn l2_penalty_values() {
        let kernel = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let d = Dense::from_parts(kernel, Tensor::new(vec![1], vec![7.0]).unwrap()).unwrap();
        let net = Network::new(vec![Layer::Dense(d)]).unwrap();
        assert_eq!(l2_penalty(&net, 0.0, L2Scope::AllKernels).unwrap(), 0.0);
        assert!((l2_penalty(&net, 0.1, L2Scope::AllKernels).unwrap() - 2.5).abs() < 1e-12);
        assert!(l2_penalty(&net, -0.1, L2Scope::AllKernels).is_err());
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let mut rng = crate::seed::rng(3);
        let net = Network::new(vec![
            Layer::Dense(Dense::init(3, 4, &mut rng)),
            Layer::Relu,
            Layer::Dense(Dense::init(4, 2, &mut rng)),
        ])
        .unwrap();
        for scope in [L2Scope::AllKernels, L2Scope::LastDense] {
            let mut g = crate::nn::Gradients::zeros_like(&net);
            add_l2_grad(&net, 0.3, scope, &mut g).unwrap();
            let analytic = g.flatten();
            let base = net.flat_params();
            let h = 1e-5;
            for k in 0..base.len() {
                let eval = |delta: f64| {
                    let mut n = net.clone();
                    *n.params_mut().nth(k).unwrap() += delta;
                    l2_penalty(&n, 0.3, scope).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = analytic[k].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (analytic[k] - fd).abs() / denom < 1e-6 || (analytic[k] - fd).abs() < 1e-10,
                    "param {k}: {} vs {fd}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn bce_weights_and_gradient_sign() {
        let p = Tensor::new(vec![2, 1], vec![0.9, 0.2]).unwrap();
        let l = binary_cross_entropy(&p, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((l - expected).abs() < 1e-15);
        let g = binary_cross_entropy_grad(&p, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(g.data()[0] < 0.0 && g.data()[1] > 0.0);
    }
}
