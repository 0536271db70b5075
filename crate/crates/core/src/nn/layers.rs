use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Fully connected layer, `y = x · kernel + bias` with `kernel: [in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Kernel entries drawn from `U(-1/√in, 1/√in)`, zero bias.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Dense {
            kernel: Tensor::from_raw(vec![in_dim, out_dim], data),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn from_parts(kernel: Tensor, bias: Tensor) -> crate::Result<Self> {
        if kernel.shape().len() != 2 || bias.shape() != [kernel.shape()[1]] {
            return Err(crate::Error::shape(
                "Dense::from_parts",
                "kernel [in, out] with bias [out]",
                format!("kernel {:?}, bias {:?}", kernel.shape(), bias.shape()),
            ));
        }
        Ok(Dense { kernel, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x.matmul(&self.kernel);
        let b = self.bias.data();
        let c = y.cols();
        for row in y.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    /// Returns `(dx, dkernel, dbias)`.
    pub(crate) fn backward(&self, x: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
        let dx = dy.matmul_t(&self.kernel);
        let dk = x.t_matmul(dy);
        let db = dy.sum_rows();
        (dx, dk, db)
    }
}

/// `relu(x + outer(relu(inner(x))))`; width preserving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub inner: Dense,
    pub outer: Dense,
}

impl ResidualBlock {
    pub fn init<R: Rng>(width: usize, rng: &mut R) -> Self {
        ResidualBlock {
            inner: Dense::init(width, width, rng),
            outer: Dense::init(width, width, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.inner.in_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(Dense),
    Relu,
    /// Inverted dropout: kept units are scaled by `1 / (1 - p)` at train time.
    Dropout { p: f64 },
    Softmax,
    Sigmoid,
    Residual(ResidualBlock),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
            Layer::Softmax => "softmax",
            Layer::Sigmoid => "sigmoid",
            Layer::Residual(_) => "residual",
        }
    }

    /// Number of dense parameter slots this layer owns.
    pub fn param_slots(&self) -> usize {
        match self {
            Layer::Dense(_) => 1,
            Layer::Residual(_) => 2,
            _ => 0,
        }
    }
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub(crate) fn relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_raw(dy.shape().to_vec(), data)
}

pub(crate) fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub(crate) fn softmax_backward(probs: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    let c = probs.cols();
    for (p, g) in probs.data().chunks(c).zip(dx.data_mut().chunks_mut(c)) {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for (gv, pv) in g.iter_mut().zip(p) {
            *gv = pv * (*gv - dot);
        }
    }
    dx
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_raw(dy.shape().to_vec(), data)
}
