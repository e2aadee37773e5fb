//! Differentially private SGD experiments: tensors and small CNNs with
//! per-sample gradients, DPSGD training, an RDP privacy accountant,
//! membership-inference attacks, and a genetic search over the activation
//! bound.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod data;
pub mod dp;
pub mod error;
pub mod exp;
pub mod ga;
pub mod mia;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
