use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    BoundedRelu,
    Tanh,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "ReLU",
            ActivationKind::BoundedRelu => "BoundedReLU",
            ActivationKind::Tanh => "Tanh",
        }
    }
}

/// An activation kind together with its bound (only meaningful for
/// `BoundedRelu`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Activation {
    kind: ActivationKind,
    bound: f64,
}

impl Activation {
    pub fn new(kind: ActivationKind, bound: Option<f64>) -> Result<Self> {
        match kind {
            ActivationKind::BoundedRelu => {
                let a = bound.ok_or_else(|| {
                    Error::config("BoundedReLU requires a bound `a` (missing key `model.bound`)")
                })?;
                if !(a > 0.0) || a.is_nan() {
                    return Err(Error::config(format!("BoundedReLU bound must be > 0, got {a}")));
                }
                Ok(Self { kind, bound: a })
            }
            _ => Ok(Self {
                kind,
                bound: f64::INFINITY,
            }),
        }
    }

    pub fn relu() -> Self {
        Self {
            kind: ActivationKind::Relu,
            bound: f64::INFINITY,
        }
    }

    pub fn tanh() -> Self {
        Self {
            kind: ActivationKind::Tanh,
            bound: f64::INFINITY,
        }
    }

    pub fn bounded_relu(a: f64) -> Result<Self> {
        Self::new(ActivationKind::BoundedRelu, Some(a))
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    /// The cap `a` for BoundedReLU, `None` otherwise.
    pub fn bound(&self) -> Option<f64> {
        (self.kind == ActivationKind::BoundedRelu).then_some(self.bound)
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::BoundedRelu => x.max(0.0).min(self.bound),
            ActivationKind::Tanh => x.tanh(),
        }
    }

    /// Derivative at the recorded input `x`. ReLU'(0) = 0; BoundedReLU is
    /// 1 only on the open interval `(0, a)`.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::BoundedRelu => {
                if x > 0.0 && x < self.bound {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub(crate) fn forward_slice(&self, x: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = self.apply(v);
        }
    }

    pub(crate) fn backward_slice(&self, x: &[f64], upstream: &[f64], out: &mut [f64]) {
        for ((o, &v), &u) in out.iter_mut().zip(x).zip(upstream) {
            *o = if u == 0.0 { 0.0 } else { u * self.derivative(v) };
        }
    }
}

/// Elementwise activation of a whole tensor.
pub fn activation_forward(kind: ActivationKind, a: Option<f64>, x: &Tensor) -> Result<Tensor> {
    let act = Activation::new(kind, a)?;
    let mut out = vec![0.0; x.len()];
    act.forward_slice(x.data(), &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// `upstream` times the activation derivative at the forward input `x`.
pub fn activation_backward(
    kind: ActivationKind,
    a: Option<f64>,
    x: &Tensor,
    upstream: &Tensor,
) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::dim(format!(
            "activation input {:?} and upstream {:?} differ",
            x.shape(),
            upstream.shape()
        )));
    }
    let act = Activation::new(kind, a)?;
    let mut out = vec![0.0; x.len()];
    act.backward_slice(x.data(), upstream.data(), &mut out);
    Tensor::new(x.shape().to_vec(), out)
}
