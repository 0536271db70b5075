//! Small deterministic feed-forward engine: dense and residual layers,
//! reverse-mode gradients, Adam, dropout and l2 penalties.

mod adam;
pub mod checkpoint;
mod layers;
pub mod loss;
mod network;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{Dense, Layer, ResidualBlock};
pub use loss::{cross_entropy, L2Scope, PROB_EPS};
pub use network::{Backward, ClassifierSpec, DenseGrad, Gradients, Mode, Network, Trace};
pub use tensor::{argmax, Tensor};
