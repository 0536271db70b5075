//! Independent oracles shared by the integration tests. Nothing here calls
//! into the engine's own forward/backward code paths.
#![allow(dead_code)]

use dap_core::nn::{Layer, Network};

/// Central finite differences of `loss` with respect to every parameter, in
/// the engine's flat slot order.
pub fn fd_gradient(net: &Network, h: f64, loss: impl Fn(&Network) -> f64) -> Vec<f64> {
    let n = net.flat_params().len();
    (0..n)
        .map(|k| {
            let mut plus = net.clone();
            *plus.params_mut().nth(k).unwrap() += h;
            let mut minus = net.clone();
            *minus.params_mut().nth(k).unwrap() -= h;
            (loss(&plus) - loss(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Max over entries of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn naive_dense(x: &[Vec<f64>], kernel: &[f64], bias: &[f64], out: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    let mut acc = bias[j];
                    for (i, xv) in row.iter().enumerate() {
                        acc += xv * kernel[i * out + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Eval-mode forward written with plain loops over `Vec<Vec<f64>>`.
pub fn forward_oracle(net: &Network, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut a: Vec<Vec<f64>> = x.to_vec();
    for layer in net.layers() {
        a = match layer {
            Layer::Dense(d) => naive_dense(&a, d.kernel.data(), d.bias.data(), d.out_dim()),
            Layer::Relu => a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect(),
            Layer::Dropout { .. } => a,
            Layer::Sigmoid => a.iter().map(|r| r.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()).collect(),
            Layer::Softmax => a
                .iter()
                .map(|r| {
                    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                })
                .collect(),
            Layer::Residual(b) => {
                let h = naive_dense(&a, b.inner.kernel.data(), b.inner.bias.data(), b.inner.out_dim());
                let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
                let z = naive_dense(&h, b.outer.kernel.data(), b.outer.bias.data(), b.outer.out_dim());
                z.iter()
                    .zip(&a)
                    .map(|(zr, xr)| zr.iter().zip(xr).map(|(u, v)| (u + v).max(0.0)).collect())
                    .collect()
            }
        };
    }
    a
}

/// Deterministic pseudo-random values in `[-1, 1)` without touching the
/// crate's RNG plumbing.
pub fn lcg_values(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Splits a flat buffer into rows of `width`.
pub fn rows(values: &[f64], width: usize) -> Vec<Vec<f64>> {
    values.chunks(width).map(|c| c.to_vec()).collect()
}

/// Adds small deterministic offsets to every parameter so that no
/// pre-activation sits exactly on a ReLU kink (zero-initialised biases make
/// that common for dead rows).
pub fn jitter(net: &Network, seed: u64) -> Network {
    let mut out = net.clone();
    let n = out.flat_params().len();
    for (p, v) in out.params_mut().zip(lcg_values(seed, n)) {
        *p += 0.05 * v;
    }
    out
}

/// Nearest-centroid classifier fit on `train`, scored on `test`.
pub fn nearest_centroid_accuracy(train: &[dap_core::data::Example], test: &[dap_core::data::Example], c: usize) -> f64 {
    let dim = train[0].features.len();
    let mut sums = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for e in train {
        counts[e.label] += 1;
        for (s, v) in sums[e.label].iter_mut().zip(&e.features) {
            *s += v;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n.max(1) as f64).collect())
        .collect();
    let hits = test
        .iter()
        .filter(|e| {
            let d = |k: usize| -> f64 { centroids[k].iter().zip(&e.features).map(|(a, b)| (a - b).powi(2)).sum() };
            let best = (0..c).min_by(|&a, &b| d(a).partial_cmp(&d(b)).unwrap()).unwrap();
            best == e.label
        })
        .count();
    hits as f64 / test.len() as f64
}

/// Pairwise `(wins + ties / 2) / (m n)`.
pub fn brute_force_auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut s = 0.0;
    for m in members {
        for n in nonmembers {
            if m > n {
                s += 1.0;
            } else if m == n {
                s += 0.5;
            }
        }
    }
    s / (members.len() * nonmembers.len()) as f64
}

/// `-ln p[label]` with the engine's probability floor, written out by hand.
pub fn ce_oracle(probs: &[f64], label: usize) -> f64 {
    -probs[label].clamp(1e-7, 1.0 - 1e-7).ln()
}

/// Small fast training settings for integration tests.
pub fn quick_train(max_epochs: usize) -> dap_core::train::TrainConfig {
    dap_core::train::TrainConfig {
        max_epochs,
        patience: max_epochs,
        ..Default::default()
    }
}
