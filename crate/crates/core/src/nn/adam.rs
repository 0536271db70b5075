use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-slot moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update to slots where both `mask` and the network's
    /// trainable flag are set. Other slots, including their moment buffers,
    /// are left untouched. The step counter always advances by one.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, mask: &[bool]) -> Result<()> {
        if grads.slots.len() != net.num_slots() || mask.len() != net.num_slots() {
            return Err(Error::shape(
                "adam_step",
                net.num_slots(),
                format!("{} gradient slots / {} mask entries", grads.slots.len(), mask.len()),
            ));
        }
        let active: Vec<bool> = mask.iter().zip(net.trainable_mask()).map(|(a, b)| *a && *b).collect();
        for (i, g) in grads.slots.iter().enumerate() {
            if active[i] && !(g.kernel.is_finite() && g.bias.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter slot {i} at adam step {}", self.t + 1)));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, dense) in net.dense_slots_mut().into_iter().enumerate() {
            if !active[i] {
                continue;
            }
            let g = &grads.slots[i];
            let (m, v) = (&mut self.m.slots[i], &mut self.v.slots[i]);
            let pairs = [
                (dense.kernel.data_mut(), g.kernel.data(), m.kernel.data_mut(), v.kernel.data_mut()),
                (dense.bias.data_mut(), g.bias.data(), m.bias.data_mut(), v.bias.data_mut()),
            ];
            for (p, g, m, v) in pairs {
                for j in 0..p.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
