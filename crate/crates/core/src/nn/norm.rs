//! Batch and layer normalization over `[N, C, S]` activations (`S` is the
//! flattened spatial extent, 1 for dense features).
//!
//! Axis 0 reduces over the batch dimension, giving one statistic per
//! channel. Axis 1 reduces over the channel dimension, giving one statistic
//! per sample. Only batch-axis BatchNorm keeps running statistics; the other
//! combinations always normalize with the statistics of the data at hand.
//!
//! Under per-sample differentiation, batch-axis statistics are treated as
//! constants (no gradient flows through the mean or variance). The per-sample
//! gradients of a model containing such a layer therefore still depend on the
//! other samples of the batch through the statistics, so they are not
//! strictly per-sample in the differential-privacy sense.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    BatchNorm,
    LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum NormAxis {
    /// Statistics per channel, reduced over the batch (axis 0).
    Batch,
    /// Statistics per sample, reduced over channels (axis 1).
    Feature,
}

impl TryFrom<u8> for NormAxis {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(NormAxis::Batch),
            1 => Ok(NormAxis::Feature),
            other => Err(format!("norm axis must be 0 or 1, got {other}")),
        }
    }
}

impl From<NormAxis> for u8 {
    fn from(a: NormAxis) -> u8 {
        match a {
            NormAxis::Batch => 0,
            NormAxis::Feature => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-group statistics: one entry per channel (batch axis) or per sample
/// (feature axis).
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct GroupStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn group_stats(x: &[f64], n: usize, c: usize, s: usize, axis: NormAxis) -> GroupStats {
    match axis {
        NormAxis::Batch => {
            let count = (n * s) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for i in 0..n {
                    let base = (i * c + ch) * s;
                    sum += x[base..base + s].iter().sum::<f64>();
                }
                let m = sum / count;
                let mut sq = 0.0;
                for i in 0..n {
                    let base = (i * c + ch) * s;
                    sq += x[base..base + s].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            GroupStats { mean, var }
        }
        NormAxis::Feature => {
            let w = c * s;
            let mut mean = vec![0.0; n];
            let mut var = vec![0.0; n];
            for i in 0..n {
                let row = &x[i * w..(i + 1) * w];
                let m = row.iter().sum::<f64>() / w as f64;
                mean[i] = m;
                var[i] = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w as f64;
            }
            GroupStats { mean, var }
        }
    }
}

/// Normalize with the given statistics, then apply the per-channel affine
/// map. Returns `(y, x_hat, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn normalize(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    axis: NormAxis,
    stats: &GroupStats,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let g = match axis {
                NormAxis::Batch => ch,
                NormAxis::Feature => i,
            };
            let base = (i * c + ch) * s;
            for j in base..base + s {
                let h = (x[j] - stats.mean[g]) * inv_std[g];
                xhat[j] = h;
                y[j] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Standalone normalization layer with its own affine parameters and running
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub kind: NormKind,
    pub axis: NormAxis,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl NormLayer {
    pub fn new(kind: NormKind, axis: NormAxis, channels: usize) -> Self {
        Self {
            kind,
            axis,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn uses_running_stats(&self) -> bool {
        self.kind == NormKind::BatchNorm && self.axis == NormAxis::Batch
    }

    /// Normalize `x` of shape `[N, C, ...]`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.rank() < 2 || x.shape()[1] != self.gamma.len() {
            return Err(Error::dim(format!(
                "norm layer with {} channels cannot take input {:?}",
                self.gamma.len(),
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let c = x.shape()[1];
        let s = x.shape()[2..].iter().product();
        let stats = select_stats(
            self.kind,
            self.axis,
            mode,
            x.data(),
            n,
            c,
            s,
            &mut self.running_mean,
            &mut self.running_var,
        )?;
        let (y, _, _) = normalize(x.data(), n, c, s, self.axis, &stats, &self.gamma, &self.beta);
        Tensor::new(x.shape().to_vec(), y)
    }
}

/// Pick the statistics a forward pass should use and update running
/// statistics when training a batch-axis BatchNorm.
#[allow(clippy::too_many_arguments)]
pub(crate) fn select_stats(
    kind: NormKind,
    axis: NormAxis,
    mode: Mode,
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    running_mean: &mut [f64],
    running_var: &mut [f64],
) -> Result<GroupStats> {
    if kind == NormKind::BatchNorm && axis == NormAxis::Batch {
        match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::Runtime(format!(
                        "BatchNorm in training mode needs a batch of at least 2, got {n}"
                    )));
                }
                let stats = group_stats(x, n, c, s, axis);
                for ch in 0..c {
                    running_mean[ch] =
                        RUNNING_MOMENTUM * running_mean[ch] + (1.0 - RUNNING_MOMENTUM) * stats.mean[ch];
                    running_var[ch] =
                        RUNNING_MOMENTUM * running_var[ch] + (1.0 - RUNNING_MOMENTUM) * stats.var[ch];
                }
                Ok(stats)
            }
            Mode::Eval => Ok(GroupStats {
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
            }),
        }
    } else {
        Ok(group_stats(x, n, c, s, axis))
    }
}

/// Standalone normalization with unit scale and zero shift.
pub fn norm_forward(kind: NormKind, axis: NormAxis, x: &Tensor, mode: Mode) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::dim(format!("norm input must be [N, C, ...], got {:?}", x.shape())));
    }
    NormLayer::new(kind, axis, x.shape()[1]).forward(x, mode)
}
