use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Dense, Layer};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Forward-pass mode. Dropout draws its mask from `seed` in train mode and is
/// the identity in eval mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Gradient for one dense parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Gradients for every dense parameter slot of a network, in slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub slots: Vec<DenseGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            slots: net
                .dense_slots()
                .into_iter()
                .map(|d| DenseGrad {
                    kernel: Tensor::zeros(d.kernel.shape()),
                    bias: Tensor::zeros(d.bias.shape()),
                })
                .collect(),
        }
    }

    /// Euclidean norm over all parameters of all slots.
    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .map(|s| s.kernel.sum_sq() + s.bias.sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for s in &mut self.slots {
            s.kernel.scale_in_place(k);
            s.bias.scale_in_place(k);
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, k: f64) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.kernel.add_scaled(&b.kernel, k);
            a.bias.add_scaled(&b.bias, k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots
            .iter()
            .all(|s| s.kernel.is_finite() && s.bias.is_finite())
    }

    /// Flattened view, slot by slot, kernel before bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.slots {
            out.extend_from_slice(s.kernel.data());
            out.extend_from_slice(s.bias.data());
        }
        out
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.slots
            .iter_mut()
            .flat_map(|s| s.kernel.data_mut().iter_mut().chain(s.bias.data_mut().iter_mut()))
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Mask(Tensor),
    Residual { h1: Tensor, a1: Tensor, z: Tensor },
}

/// Cached activations of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    signature: u64,
    activations: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace holds the input at least")
    }

    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    /// Input to the layer at `index` (equivalently, output of `index - 1`).
    pub fn activation(&self, index: usize) -> &Tensor {
        &self.activations[index]
    }
}

/// Result of a backward pass: parameter gradients and the gradient with
/// respect to the network input.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Gradients,
    pub input_grad: Tensor,
}

/// Ordered stack of layers with a per-slot trainability mask.
///
/// Parameter slots are numbered in layer order: a `Dense` layer owns one slot
/// and a residual block owns two (inner, outer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    trainable: Vec<bool>,
    last_dense: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let slots: usize = layers.iter().map(Layer::param_slots).sum();
        Self::with_mask(layers, vec![true; slots])
    }

    pub fn with_mask(layers: Vec<Layer>, trainable: Vec<bool>) -> Result<Self> {
        let first_width = match layers.first() {
            Some(Layer::Dense(d)) => d.in_dim(),
            Some(Layer::Residual(r)) => r.width(),
            Some(l) => {
                return Err(Error::InvalidArgument(format!(
                    "network must start with a parametric layer, found {}",
                    l.name()
                )))
            }
            None => return Err(Error::InvalidArgument("network has no layers".into())),
        };
        let mut width = first_width;
        let mut slot = 0;
        let mut last_dense = None;
        let mut softmax_at = None;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    if d.in_dim() != width {
                        return Err(Error::shape("layer composition", width, format!("{} at layer {i}", d.in_dim())));
                    }
                    width = d.out_dim();
                    last_dense = Some(slot);
                }
                Layer::Residual(r) => {
                    if r.width() != width || r.inner.out_dim() != width || r.outer.in_dim() != width || r.outer.out_dim() != width {
                        return Err(Error::shape("residual block", width, format!("block at layer {i}")));
                    }
                }
                Layer::Dropout { p } => {
                    if !(0.0..1.0).contains(p) {
                        return Err(Error::InvalidArgument(format!("dropout p must be in [0,1), got {p}")));
                    }
                }
                Layer::Softmax => {
                    if softmax_at.replace(i).is_some() {
                        return Err(Error::InvalidArgument("more than one softmax layer".into()));
                    }
                }
                Layer::Relu | Layer::Sigmoid => {}
            }
            slot += layer.param_slots();
        }
        if let Some(i) = softmax_at {
            if i + 1 != layers.len() {
                return Err(Error::InvalidArgument("softmax must be the terminal layer".into()));
            }
        }
        if trainable.len() != slot {
            return Err(Error::shape("trainable mask", slot, trainable.len()));
        }
        let last_dense = last_dense
            .ok_or_else(|| Error::InvalidArgument("network needs at least one plain dense layer".into()))?;
        Ok(Network {
            layers,
            trainable,
            last_dense,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        match &self.layers[0] {
            Layer::Dense(d) => d.in_dim(),
            Layer::Residual(r) => r.width(),
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.out_dim()),
                Layer::Residual(r) => Some(r.width()),
                _ => None,
            })
            .expect("validated at construction")
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Softmax))
    }

    pub fn num_slots(&self) -> usize {
        self.trainable.len()
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_trainable(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.trainable.len() {
            return Err(Error::shape("trainable mask", self.trainable.len(), mask.len()));
        }
        self.trainable = mask;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    /// Slot index of the final plain dense layer.
    pub fn last_dense_index(&self) -> usize {
        self.last_dense
    }

    /// Mask selecting only the final dense layer.
    pub fn last_dense_mask(&self) -> Vec<bool> {
        (0..self.num_slots()).map(|i| i == self.last_dense).collect()
    }

    pub fn dense_slots(&self) -> Vec<&Dense> {
        let mut out = Vec::with_capacity(self.num_slots());
        for l in &self.layers {
            match l {
                Layer::Dense(d) => out.push(d),
                Layer::Residual(r) => {
                    out.push(&r.inner);
                    out.push(&r.outer);
                }
                _ => {}
            }
        }
        out
    }

    pub fn dense_slots_mut(&mut self) -> Vec<&mut Dense> {
        let mut out = Vec::with_capacity(self.trainable.len());
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => out.push(d),
                Layer::Residual(r) => {
                    out.push(&mut r.inner);
                    out.push(&mut r.outer);
                }
                _ => {}
            }
        }
        out
    }

    /// All parameters flattened in slot order (kernel, then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for d in self.dense_slots() {
            out.extend_from_slice(d.kernel.data());
            out.extend_from_slice(d.bias.data());
        }
        out
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.dense_slots_mut()
            .into_iter()
            .flat_map(|d| d.kernel.data_mut().iter_mut().chain(d.bias.data_mut().iter_mut()))
    }

    /// Order-sensitive digest of the raw parameter bits.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.flat_params() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn signature(&self) -> u64 {
        let mut tags = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            tags.push(l.name().len() as u64 ^ (l.name().as_bytes()[0] as u64) << 8);
            match l {
                Layer::Dense(d) => tags.push((d.in_dim() as u64) << 32 | d.out_dim() as u64),
                Layer::Residual(r) => tags.push(r.width() as u64),
                _ => {}
            }
        }
        seed::derive(0, &tags)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_traced(x, mode)?.activations.pop().expect("non-empty"))
    }

    pub fn forward_traced(&self, x: &Tensor, mode: Mode) -> Result<Trace> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward input",
                format!("[B, {}]", self.input_dim()),
                format!("{:?}", x.shape()),
            ));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = activations.last().expect("non-empty");
            let (out, a) = match layer {
                Layer::Dense(d) => (d.forward(input), Aux::None),
                Layer::Relu => (layers::relu(input), Aux::None),
                Layer::Softmax => (layers::softmax(input), Aux::None),
                Layer::Sigmoid => (input.map(layers::sigmoid_scalar), Aux::None),
                Layer::Dropout { p } => match mode {
                    Mode::Train { seed } if *p > 0.0 => {
                        let mut rng = seed::rng(seed::derive(seed, &[seed::TAG_DROPOUT, i as u64]));
                        let keep = 1.0 / (1.0 - p);
                        let mask_data = (0..input.len())
                            .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
                            .collect();
                        let mask = Tensor::from_raw(input.shape().to_vec(), mask_data);
                        let out_data = input.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
                        (Tensor::from_raw(input.shape().to_vec(), out_data), Aux::Mask(mask))
                    }
                    _ => (input.clone(), Aux::None),
                },
                Layer::Residual(r) => {
                    let h1 = r.inner.forward(input);
                    let a1 = layers::relu(&h1);
                    let mut z = r.outer.forward(&a1);
                    z.add_assign(input);
                    let out = layers::relu(&z);
                    (out, Aux::Residual { h1, a1, z })
                }
            };
            if !out.is_finite() {
                return Err(Error::NonFinite(format!("forward output of layer {i} ({})", layer.name())));
            }
            activations.push(out);
            aux.push(a);
        }
        Ok(Trace {
            signature: self.signature(),
            activations,
            aux,
        })
    }

    /// Backpropagates `upstream` (gradient of the loss with respect to the
    /// network output). Gradients are produced for every slot regardless of
    /// the trainable mask; masking happens at the update step.
    pub fn backward(&self, trace: &Trace, upstream: &Tensor) -> Result<Backward> {
        if trace.signature != self.signature() || trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::NoMatchingForward("trace was recorded on a different network".into()));
        }
        if upstream.shape() != trace.output().shape() {
            return Err(Error::NoMatchingForward(format!(
                "upstream gradient shape {:?} does not match traced output {:?}",
                upstream.shape(),
                trace.output().shape()
            )));
        }
        let mut slot_grads: Vec<Option<DenseGrad>> = vec![None; self.num_slots()];
        let mut slot = self.num_slots();
        let mut grad = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[i];
            let output = &trace.activations[i + 1];
            grad = match (layer, &trace.aux[i]) {
                (Layer::Dense(d), _) => {
                    slot -= 1;
                    let (dx, dk, db) = d.backward(input, &grad);
                    slot_grads[slot] = Some(DenseGrad { kernel: dk, bias: db });
                    dx
                }
                (Layer::Relu, _) => layers::relu_backward(input, &grad),
                (Layer::Softmax, _) => layers::softmax_backward(output, &grad),
                (Layer::Sigmoid, _) => layers::sigmoid_backward(output, &grad),
                (Layer::Dropout { .. }, Aux::Mask(mask)) => {
                    let data = grad.data().iter().zip(mask.data()).map(|(g, m)| g * m).collect();
                    Tensor::from_raw(grad.shape().to_vec(), data)
                }
                (Layer::Dropout { .. }, _) => grad,
                (Layer::Residual(r), Aux::Residual { h1, a1, z }) => {
                    slot -= 2;
                    let dz = layers::relu_backward(z, &grad);
                    let (da1, dk2, db2) = r.outer.backward(a1, &dz);
                    let dh1 = layers::relu_backward(h1, &da1);
                    let (mut dx, dk1, db1) = r.inner.backward(input, &dh1);
                    dx.add_assign(&dz);
                    slot_grads[slot] = Some(DenseGrad { kernel: dk1, bias: db1 });
                    slot_grads[slot + 1] = Some(DenseGrad { kernel: dk2, bias: db2 });
                    dx
                }
                (Layer::Residual(_), _) => {
                    return Err(Error::NoMatchingForward("residual block trace missing".into()));
                }
            };
        }
        Ok(Backward {
            grads: Gradients {
                slots: slot_grads.into_iter().map(|g| g.expect("every slot visited")).collect(),
            },
            input_grad: grad,
        })
    }
}

/// Layer sizes for a dense classifier: `input → hidden… → classes → softmax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// Dropout probability after each hidden activation; 0 disables.
    #[serde(default)]
    pub dropout: f64,
}

impl ClassifierSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        ClassifierSpec {
            input_dim,
            hidden,
            num_classes,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn build(&self, seed: u64) -> Result<Network> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid classifier spec {self:?}")));
        }
        let mut rng = seed::rng(seed::derive(seed, &[seed::TAG_INIT]));
        let mut layers = Vec::new();
        let mut width = self.input_dim;
        for &h in &self.hidden {
            layers.push(Layer::Dense(Dense::init(width, h, &mut rng)));
            layers.push(Layer::Relu);
            if self.dropout > 0.0 {
                layers.push(Layer::Dropout { p: self.dropout });
            }
            width = h;
        }
        layers.push(Layer::Dense(Dense::init(width, self.num_classes, &mut rng)));
        layers.push(Layer::Softmax);
        Network::new(layers)
    }
}
