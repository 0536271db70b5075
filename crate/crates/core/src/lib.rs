//! Membership-inference-aware training.
//!
//! The crate trains dense classifiers that resist membership inference by
//! adversarial training against a frozen attack model built from shadow
//! models. It also ships comparison defenses (l2/dropout regularisation and
//! DP-SGD), a loss-threshold and shadow-discriminator attack suite, and the
//! accuracy-over-privacy trade-off score.

pub mod data;
pub mod error;
pub mod nn;
pub mod seed;
pub mod train;
pub mod eval;
pub mod shadow;
pub mod discriminator;
pub mod dap;
pub mod baselines;
pub mod harness;

pub use error::{Error, Result};
