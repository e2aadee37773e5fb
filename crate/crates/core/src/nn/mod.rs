//! Layers, architectures and per-sample backpropagation.

mod activation;
mod grads;
mod model;
mod norm;

pub use activation::{activation_backward, activation_forward, Activation, ActivationKind};
pub use grads::PerSampleGradients;
pub use model::{arch_layers, build_model, clip_factor, Arch, ForwardOutput, LayerSpec, Model, ModelOptions, NormChoice, Tape};
pub(crate) use model::argmax;
pub use norm::{norm_forward, Mode, NormAxis, NormKind, NormLayer, NORM_EPS, RUNNING_MOMENTUM};
