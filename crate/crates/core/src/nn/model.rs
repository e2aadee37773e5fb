//! Layer chains, parameters, forward evaluation and backpropagation.
//!
//! All parameters of a model live in one flat vector, laid out layer by
//! layer (weights then bias). Gradients use the same layout, so a gradient
//! vector can be clipped, noised, and applied without knowing the layers.
//!
//! Backpropagation runs over a contiguous range of samples. A one-sample
//! range yields that sample's gradient; the whole batch with a `1/N` scale
//! yields the gradient of the mean loss.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::activation::{Activation, ActivationKind};
use super::grads::PerSampleGradients;
use super::norm::{normalize, select_stats, GroupStats, Mode, NormAxis, NormKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{col2im, gemm, im2col, l2_norm_slice, ConvGeometry, MatRef, Tensor};

/// The fixed architectures the laboratory supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Two conv/pool blocks, a 32-unit dense layer and a 10-way softmax.
    MnistCnn,
    /// Four 3x3 conv/pool blocks (32, 64, 128, 256 filters), dense 32, softmax 10.
    Cifar10Cnn,
}

impl Arch {
    pub fn default_input(self) -> [usize; 3] {
        match self {
            Arch::MnistCnn => [1, 28, 28],
            Arch::Cifar10Cnn => [3, 32, 32],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormChoice {
    pub kind: NormKind,
    pub axis: NormAxis,
}

/// Knobs substituted into an architecture template.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptions {
    pub activation: ActivationKind,
    pub bound: Option<f64>,
    pub norm: Option<NormChoice>,
    pub dropout: Option<f64>,
    /// Input `[C, H, W]`; defaults to the architecture's native input.
    pub input_shape: Option<[usize; 3]>,
}

impl ModelOptions {
    pub fn new(activation: ActivationKind, bound: Option<f64>) -> Self {
        Self {
            activation,
            bound,
            norm: None,
            dropout: None,
            input_shape: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Dense {
        units: usize,
    },
    Activation(Activation),
    Norm {
        kind: NormKind,
        axis: NormAxis,
    },
    Dropout {
        rate: f64,
    },
    /// Final dense projection to `units` logits followed by softmax.
    Softmax {
        units: usize,
    },
}

impl LayerSpec {
    fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } | LayerSpec::Norm { .. } | LayerSpec::Softmax { .. }
        )
    }
}

/// Layer chain for `arch` with the requested substitutions.
///
/// The activation is placed after every convolution and after the hidden
/// dense layer. Normalization and dropout, when requested, follow each
/// convolution's activation; dropout is also applied before the output layer.
pub fn arch_layers(arch: Arch, opts: &ModelOptions) -> Result<Vec<LayerSpec>> {
    let act = Activation::new(opts.activation, opts.bound)?;
    if let Some(p) = opts.dropout {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {p}")));
        }
    }
    let conv_block = |layers: &mut Vec<LayerSpec>, conv: LayerSpec, pool: LayerSpec| {
        layers.push(conv);
        layers.push(LayerSpec::Activation(act));
        if let Some(n) = opts.norm {
            layers.push(LayerSpec::Norm {
                kind: n.kind,
                axis: n.axis,
            });
        }
        if let Some(p) = opts.dropout {
            layers.push(LayerSpec::Dropout { rate: p });
        }
        layers.push(pool);
    };
    let mut layers = Vec::new();
    match arch {
        Arch::MnistCnn => {
            // Padding 3 on the first convolution and stride-1 pooling: the
            // only reading of the 8x8/s2, 4x4/s2 stack that fits 28x28 input.
            conv_block(
                &mut layers,
                LayerSpec::Conv {
                    filters: 16,
                    kernel: 8,
                    stride: 2,
                    padding: 3,
                },
                LayerSpec::MaxPool { kernel: 2, stride: 1 },
            );
            conv_block(
                &mut layers,
                LayerSpec::Conv {
                    filters: 32,
                    kernel: 4,
                    stride: 2,
                    padding: 0,
                },
                LayerSpec::MaxPool { kernel: 2, stride: 1 },
            );
        }
        Arch::Cifar10Cnn => {
            for filters in [32, 64, 128, 256] {
                conv_block(
                    &mut layers,
                    LayerSpec::Conv {
                        filters,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    LayerSpec::MaxPool { kernel: 2, stride: 2 },
                );
            }
        }
    }
    layers.push(LayerSpec::Dense { units: 32 });
    layers.push(LayerSpec::Activation(act));
    if let Some(p) = opts.dropout {
        layers.push(LayerSpec::Dropout { rate: p });
    }
    layers.push(LayerSpec::Softmax { units: 10 });
    Ok(layers)
}

/// Build one of the supported architectures with freshly initialized weights.
pub fn build_model(arch: Arch, opts: &ModelOptions, rng: &mut Rng) -> Result<Model> {
    let layers = arch_layers(arch, opts)?;
    Model::new(opts.input_shape.unwrap_or(arch.default_input()), layers, rng)
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    offset: usize,
    len: usize,
    running: Option<(Vec<f64>, Vec<f64>)>,
}

impl Layer {
    fn in_len(&self) -> usize {
        self.in_shape.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn conv_geometry(&self) -> Option<ConvGeometry> {
        match self.spec {
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = self.in_shape;
                ConvGeometry::new(c, h, w, kernel, stride, padding).ok()
            }
            _ => None,
        }
    }
}

/// A layer chain with its learned parameters and normalization buffers.
#[derive(Clone, Debug)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    params: Vec<f64>,
    mode: Mode,
}

#[derive(Clone, Debug)]
enum Cache {
    None,
    /// Per output cell, the index of the selected input within its sample.
    Pool(Vec<u32>),
    /// Inverted-dropout multipliers (0 or 1/(1-p)).
    Dropout(Vec<f64>),
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

/// Intermediates recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    mode: Mode,
    batch: usize,
    inputs: Vec<Vec<f64>>,
    caches: Vec<Cache>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub tape: Tape,
}

impl ForwardOutput {
    pub fn batch_size(&self) -> usize {
        self.tape.batch
    }

    /// Row-major `[N, ...]` output of layer `l`.
    pub fn layer_output(&self, l: usize) -> &[f64] {
        if l + 1 < self.tape.inputs.len() {
            &self.tape.inputs[l + 1]
        } else {
            self.logits.data()
        }
    }

    /// Row-major `[N, ...]` input of layer `l`.
    pub fn layer_input(&self, l: usize) -> &[f64] {
        &self.tape.inputs[l]
    }

    /// Predicted class per sample.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.tape.batch).map(|i| argmax(self.logits.row(i))).collect()
    }
}

/// `min(1, c / norm)`, with a zero vector left unscaled.
pub fn clip_factor(norm: f64, c: f64) -> f64 {
    if norm > c {
        c / norm
    } else {
        1.0
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows(logits: &[f64], units: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(units).zip(out.chunks_mut(units)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - m).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn glorot(rng: &mut Rng, dst: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in dst {
        *w = rng.uniform(-limit, limit);
    }
}

impl Model {
    /// Validate a layer chain against `input_shape` and initialize parameters:
    /// Glorot-uniform weights, zero biases, unit norm scales.
    pub fn new(input_shape: [usize; 3], specs: Vec<LayerSpec>, rng: &mut Rng) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::dim(format!("input shape {input_shape:?} has a zero extent")));
        }
        match specs.last() {
            Some(LayerSpec::Softmax { .. }) => {}
            _ => return Err(Error::config("layer chain must end with a softmax layer")),
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape;
        let mut offset = 0;
        let n_specs = specs.len();
        for (idx, spec) in specs.into_iter().enumerate() {
            let [c, h, w] = shape;
            let flat = c * h * w;
            let (out_shape, len, running) = match &spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if *filters == 0 {
                        return Err(Error::config("convolution needs at least one filter"));
                    }
                    let g = ConvGeometry::new(c, h, w, *kernel, *stride, *padding)?;
                    (
                        [*filters, g.out_height(), g.out_width()],
                        filters * g.patch_len() + filters,
                        None,
                    )
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 {
                        return Err(Error::config("pool window and stride must be positive"));
                    }
                    if *kernel > h || *kernel > w {
                        return Err(Error::dim(format!(
                            "pool window {kernel}x{kernel} exceeds feature map {h}x{w} at layer {idx}"
                        )));
                    }
                    ([c, (h - kernel) / stride + 1, (w - kernel) / stride + 1], 0, None)
                }
                LayerSpec::Dense { units } | LayerSpec::Softmax { units } => {
                    if *units == 0 {
                        return Err(Error::config("dense layer needs at least one unit"));
                    }
                    if matches!(spec, LayerSpec::Softmax { .. }) && idx + 1 != n_specs {
                        return Err(Error::config("softmax must be the last layer"));
                    }
                    ([*units, 1, 1], units * flat + units, None)
                }
                LayerSpec::Activation(_) => (shape, 0, None),
                LayerSpec::Norm { kind, axis } => {
                    let running = (*kind == NormKind::BatchNorm && *axis == NormAxis::Batch)
                        .then(|| (vec![0.0; c], vec![1.0; c]));
                    (shape, 2 * c, running)
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
                    }
                    (shape, 0, None)
                }
            };
            layers.push(Layer {
                spec,
                in_shape: shape,
                out_shape,
                offset,
                len,
                running,
            });
            offset += len;
            shape = out_shape;
        }
        let mut model = Model {
            input_shape,
            layers,
            params: vec![0.0; offset],
            mode: Mode::Train,
        };
        model.init_params(rng);
        Ok(model)
    }

    fn init_params(&mut self, rng: &mut Rng) {
        for layer in &self.layers {
            let p = &mut self.params[layer.offset..layer.offset + layer.len];
            match layer.spec {
                LayerSpec::Conv { filters, kernel, .. } => {
                    let patch = layer.in_shape[0] * kernel * kernel;
                    let (w, b) = p.split_at_mut(filters * patch);
                    glorot(rng, w, patch, filters * kernel * kernel);
                    b.fill(0.0);
                }
                LayerSpec::Dense { units } | LayerSpec::Softmax { units } => {
                    let fan_in = layer.in_len();
                    let (w, b) = p.split_at_mut(units * fan_in);
                    glorot(rng, w, fan_in, units);
                    b.fill(0.0);
                }
                LayerSpec::Norm { .. } => {
                    let c = layer.in_shape[0];
                    p[..c].fill(1.0);
                    p[c..].fill(0.0);
                }
                _ => {}
            }
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Output shape `[C, H, W]` of every layer.
    pub fn layer_shapes(&self) -> Vec<[usize; 3]> {
        self.layers.iter().map(|l| l.out_shape).collect()
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last().map(|l| &l.spec) {
            Some(LayerSpec::Softmax { units }) => *units,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dim(format!(
                "model has {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Parameter range of layer `l` inside the flat vector.
    pub fn param_range(&self, l: usize) -> Range<usize> {
        let layer = &self.layers[l];
        layer.offset..layer.offset + layer.len
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Running (mean, variance) buffers of batch-axis BatchNorm layers.
    pub fn running_stats(&self) -> Vec<(usize, &[f64], &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.running.as_ref().map(|(m, v)| (i, m.as_slice(), v.as_slice())))
            .collect()
    }

    pub fn set_running_stats(&mut self, layer: usize, mean: &[f64], var: &[f64]) -> Result<()> {
        match self.layers.get_mut(layer).and_then(|l| l.running.as_mut()) {
            Some((m, v)) if m.len() == mean.len() && v.len() == var.len() => {
                m.copy_from_slice(mean);
                v.copy_from_slice(var);
                Ok(())
            }
            _ => Err(Error::arg(format!("layer {layer} has no matching running statistics"))),
        }
    }

    /// Copy of this model with every activation replaced by `act`; weights
    /// and buffers are shared verbatim.
    pub fn with_activation(&self, act: Activation) -> Model {
        let mut m = self.clone();
        for layer in &mut m.layers {
            if let LayerSpec::Activation(a) = &mut layer.spec {
                *a = act;
            }
        }
        m
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let ok = batch.rank() == 4 && batch.shape()[1..] == self.input_shape;
        if !ok {
            return Err(Error::dim(format!(
                "batch shape {:?} does not match model input [N, {}, {}, {}]",
                batch.shape(),
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2]
            )));
        }
        Ok(batch.shape()[0])
    }

    /// Forward pass in the model's current mode. Training mode draws dropout
    /// masks from `rng` and updates BatchNorm running statistics.
    pub fn forward(&mut self, batch: &Tensor, rng: &mut Rng) -> Result<ForwardOutput> {
        let mode = self.mode;
        let (out, updates) = self.forward_impl(batch, mode, Some(rng))?;
        for (l, stats) in updates {
            if let Some((m, v)) = self.layers[l].running.as_mut() {
                for ch in 0..m.len() {
                    m[ch] = super::norm::RUNNING_MOMENTUM * m[ch]
                        + (1.0 - super::norm::RUNNING_MOMENTUM) * stats.mean[ch];
                    v[ch] = super::norm::RUNNING_MOMENTUM * v[ch]
                        + (1.0 - super::norm::RUNNING_MOMENTUM) * stats.var[ch];
                }
            }
        }
        Ok(out)
    }

    /// Evaluation-mode class probabilities; never mutates the model.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_impl(batch, Mode::Eval, None)?.0.probabilities)
    }

    /// Evaluation-mode forward pass with the full tape.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<ForwardOutput> {
        Ok(self.forward_impl(batch, Mode::Eval, None)?.0)
    }

    fn forward_impl(
        &self,
        batch: &Tensor,
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<(ForwardOutput, Vec<(usize, GroupStats)>)> {
        let n = self.check_batch(batch)?;
        let mut updates = Vec::new();
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = batch.data().to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let params = &self.params[layer.offset..layer.offset + layer.len];
            let in_len = layer.in_len();
            let out_len = layer.out_len();
            let mut out = vec![0.0; n * out_len];
            let cache = match &layer.spec {
                LayerSpec::Conv { filters, .. } => {
                    let g = layer.conv_geometry().expect("validated");
                    let patch = g.patch_len();
                    let p = g.positions();
                    let (w, b) = params.split_at(filters * patch);
                    let mut cols = vec![0.0; patch * p];
                    for i in 0..n {
                        im2col(&cur[i * in_len..(i + 1) * in_len], &g, &mut cols);
                        let dst = &mut out[i * out_len..(i + 1) * out_len];
                        gemm(1.0, MatRef::new(w, *filters, patch), MatRef::new(&cols, patch, p), 0.0, dst);
                        for (f, plane) in dst.chunks_mut(p).enumerate() {
                            for v in plane {
                                *v += b[f];
                            }
                        }
                    }
                    Cache::None
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    let [c, h, w] = layer.in_shape;
                    let [_, oh, ow] = layer.out_shape;
                    let mut arg = vec![0u32; n * out_len];
                    for i in 0..n {
                        let src = &cur[i * in_len..(i + 1) * in_len];
                        for ch in 0..c {
                            let base = ch * h * w;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = base + oy * stride * w + ox * stride;
                                    for dy in 0..*kernel {
                                        for dx in 0..*kernel {
                                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                                            if src[idx] > src[best] {
                                                best = idx;
                                            }
                                        }
                                    }
                                    let o = i * out_len + (ch * oh + oy) * ow + ox;
                                    out[o] = src[best];
                                    arg[o] = best as u32;
                                }
                            }
                        }
                    }
                    Cache::Pool(arg)
                }
                LayerSpec::Dense { units } | LayerSpec::Softmax { units } => {
                    let (w, b) = params.split_at(units * in_len);
                    gemm(
                        1.0,
                        MatRef::new(&cur, n, in_len),
                        MatRef::new(w, *units, in_len).t(),
                        0.0,
                        &mut out,
                    );
                    for row in out.chunks_mut(*units) {
                        for (v, bias) in row.iter_mut().zip(b) {
                            *v += bias;
                        }
                    }
                    Cache::None
                }
                LayerSpec::Activation(act) => {
                    act.forward_slice(&cur, &mut out);
                    Cache::None
                }
                LayerSpec::Dropout { rate } => match mode {
                    Mode::Eval => {
                        out.copy_from_slice(&cur);
                        Cache::None
                    }
                    Mode::Train => {
                        let rng = rng.as_deref_mut().ok_or_else(|| {
                            Error::State("dropout in training mode needs a random stream".into())
                        })?;
                        let keep = 1.0 - rate;
                        let mask: Vec<f64> = (0..cur.len())
                            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                            .collect();
                        for ((o, &x), &m) in out.iter_mut().zip(&cur).zip(&mask) {
                            *o = x * m;
                        }
                        Cache::Dropout(mask)
                    }
                },
                LayerSpec::Norm { kind, axis } => {
                    let c = layer.in_shape[0];
                    let s = layer.in_shape[1] * layer.in_shape[2];
                    let (mut rm, mut rv) = match &layer.running {
                        Some((m, v)) => (m.clone(), v.clone()),
                        None => (vec![0.0; c], vec![1.0; c]),
                    };
                    let stats = select_stats(*kind, *axis, mode, &cur, n, c, s, &mut rm, &mut rv)?;
                    if layer.running.is_some() && mode == Mode::Train {
                        updates.push((li, stats.clone()));
                    }
                    let (y, xhat, inv_std) =
                        normalize(&cur, n, c, s, *axis, &stats, &params[..c], &params[c..]);
                    out = y;
                    Cache::Norm { xhat, inv_std }
                }
            };
            inputs.push(std::mem::replace(&mut cur, out));
            caches.push(cache);
        }
        let units = self.num_classes();
        let probs = softmax_rows(&cur, units);
        let logits = Tensor::new(vec![n, units], cur)?;
        let probabilities = Tensor::new(vec![n, units], probs)?;
        Ok((
            ForwardOutput {
                logits,
                probabilities,
                tape: Tape {
                    mode,
                    batch: n,
                    inputs,
                    caches,
                },
            },
            updates,
        ))
    }

    fn check_backward(&self, fwd: &ForwardOutput, labels: &[u8]) -> Result<()> {
        if fwd.tape.mode != Mode::Train {
            return Err(Error::State(
                "backpropagation requires a forward pass in training mode".into(),
            ));
        }
        if fwd.tape.inputs.len() != self.layers.len() {
            return Err(Error::State("tape does not belong to this model".into()));
        }
        if labels.len() != fwd.tape.batch {
            return Err(Error::dim(format!(
                "{} labels for a batch of {}",
                labels.len(),
                fwd.tape.batch
            )));
        }
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= k) {
            return Err(Error::arg(format!("label {bad} out of range for {k} classes")));
        }
        Ok(())
    }

    /// Cross-entropy loss of each sample.
    pub fn sample_losses(&self, fwd: &ForwardOutput, labels: &[u8]) -> Vec<f64> {
        (0..fwd.tape.batch)
            .map(|i| {
                let row = fwd.logits.row(i);
                log_sum_exp(row) - row[labels[i] as usize]
            })
            .collect()
    }

    /// One gradient vector per sample (cross-entropy loss of that sample
    /// alone) plus the mean loss.
    pub fn backward_per_sample(
        &self,
        fwd: &ForwardOutput,
        labels: &[u8],
    ) -> Result<(PerSampleGradients, f64)> {
        self.check_backward(fwd, labels)?;
        let n = fwd.tape.batch;
        let dim = self.params.len();
        let mut grads = vec![0.0; n * dim];
        for (i, g) in grads.chunks_mut(dim.max(1)).enumerate().take(n) {
            self.backward_rows(fwd, labels, i..i + 1, 1.0, g);
        }
        let losses = self.sample_losses(fwd, labels);
        let mean = losses.iter().sum::<f64>() / n.max(1) as f64;
        Ok((PerSampleGradients::new(n, dim, grads)?, mean))
    }

    /// Sum of per-sample gradients, each clipped to L2 norm `clip_c`, without
    /// materializing all of them. Returns the pre-clip norms and the mean loss.
    pub fn backward_clipped_sum(
        &self,
        fwd: &ForwardOutput,
        labels: &[u8],
        clip_c: f64,
        sum: &mut [f64],
    ) -> Result<(Vec<f64>, f64)> {
        self.check_backward(fwd, labels)?;
        if sum.len() != self.params.len() {
            return Err(Error::dim(format!(
                "gradient buffer of {} for {} parameters",
                sum.len(),
                self.params.len()
            )));
        }
        let n = fwd.tape.batch;
        let mut scratch = vec![0.0; self.params.len()];
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            scratch.fill(0.0);
            self.backward_rows(fwd, labels, i..i + 1, 1.0, &mut scratch);
            let norm = l2_norm_slice(&scratch);
            let f = clip_factor(norm, clip_c);
            for (s, g) in sum.iter_mut().zip(&scratch) {
                *s += f * g;
            }
            norms.push(norm);
        }
        let losses = self.sample_losses(fwd, labels);
        Ok((norms, losses.iter().sum::<f64>() / n.max(1) as f64))
    }

    /// Gradient of the mean batch loss, computed layer-major over the whole
    /// batch, plus the mean loss.
    pub fn backward_batch(&self, fwd: &ForwardOutput, labels: &[u8]) -> Result<(Vec<f64>, f64)> {
        self.check_backward(fwd, labels)?;
        let n = fwd.tape.batch;
        let mut grad = vec![0.0; self.params.len()];
        if n > 0 {
            self.backward_rows(fwd, labels, 0..n, 1.0 / n as f64, &mut grad);
        }
        let losses = self.sample_losses(fwd, labels);
        Ok((grad, losses.iter().sum::<f64>() / n.max(1) as f64))
    }

    /// Accumulate `scale * d(sum of losses over rows)/d(params)` into `grad`.
    fn backward_rows(
        &self,
        fwd: &ForwardOutput,
        labels: &[u8],
        rows: Range<usize>,
        scale: f64,
        grad: &mut [f64],
    ) {
        let r = rows.len();
        let units = self.num_classes();
        let mut up = vec![0.0; r * units];
        for (k, i) in rows.clone().enumerate() {
            let p = fwd.probabilities.row(i);
            for u in 0..units {
                let target = if u == labels[i] as usize { 1.0 } else { 0.0 };
                up[k * units + u] = scale * (p[u] - target);
            }
        }
        let first_param = self
            .layers
            .iter()
            .position(|l| l.spec.has_params())
            .unwrap_or(self.layers.len());
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let need_dx = li > first_param;
            let in_len = layer.in_len();
            let out_len = layer.out_len();
            let x = &fwd.tape.inputs[li][rows.start * in_len..rows.end * in_len];
            let params = &self.params[layer.offset..layer.offset + layer.len];
            let g = &mut grad[layer.offset..layer.offset + layer.len];
            let mut dx = if need_dx { vec![0.0; r * in_len] } else { Vec::new() };
            match (&layer.spec, &fwd.tape.caches[li]) {
                (LayerSpec::Conv { filters, .. }, _) => {
                    let geo = layer.conv_geometry().expect("validated");
                    let patch = geo.patch_len();
                    let p = geo.positions();
                    let (w, _) = params.split_at(filters * patch);
                    let (gw, gb) = g.split_at_mut(filters * patch);
                    let mut cols = vec![0.0; patch * p];
                    for k in 0..r {
                        let up_k = &up[k * out_len..(k + 1) * out_len];
                        im2col(&x[k * in_len..(k + 1) * in_len], &geo, &mut cols);
                        gemm(
                            1.0,
                            MatRef::new(up_k, *filters, p),
                            MatRef::new(&cols, patch, p).t(),
                            1.0,
                            gw,
                        );
                        for (f, plane) in up_k.chunks(p).enumerate() {
                            gb[f] += plane.iter().sum::<f64>();
                        }
                        if need_dx {
                            gemm(
                                1.0,
                                MatRef::new(w, *filters, patch).t(),
                                MatRef::new(up_k, *filters, p),
                                0.0,
                                &mut cols,
                            );
                            col2im(&cols, &geo, &mut dx[k * in_len..(k + 1) * in_len]);
                        }
                    }
                }
                (LayerSpec::MaxPool { .. }, Cache::Pool(arg)) => {
                    if need_dx {
                        for k in 0..r {
                            let i = rows.start + k;
                            let args = &arg[i * out_len..(i + 1) * out_len];
                            let dst = &mut dx[k * in_len..(k + 1) * in_len];
                            for (j, &a) in args.iter().enumerate() {
                                dst[a as usize] += up[k * out_len + j];
                            }
                        }
                    }
                }
                (LayerSpec::Dense { units } | LayerSpec::Softmax { units }, _) => {
                    let (w, _) = params.split_at(units * in_len);
                    let (gw, gb) = g.split_at_mut(units * in_len);
                    gemm(
                        1.0,
                        MatRef::new(&up, r, *units).t(),
                        MatRef::new(x, r, in_len),
                        1.0,
                        gw,
                    );
                    for row in up.chunks(*units) {
                        for (b, &u) in gb.iter_mut().zip(row) {
                            *b += u;
                        }
                    }
                    if need_dx {
                        gemm(
                            1.0,
                            MatRef::new(&up, r, *units),
                            MatRef::new(w, *units, in_len),
                            0.0,
                            &mut dx,
                        );
                    }
                }
                (LayerSpec::Activation(act), _) => {
                    if need_dx {
                        act.backward_slice(x, &up, &mut dx);
                    }
                }
                (LayerSpec::Dropout { .. }, Cache::Dropout(mask)) => {
                    if need_dx {
                        let m = &mask[rows.start * in_len..rows.end * in_len];
                        for ((d, &u), &mk) in dx.iter_mut().zip(&up).zip(m) {
                            *d = u * mk;
                        }
                    }
                }
                (LayerSpec::Dropout { .. }, _) => {
                    if need_dx {
                        dx.copy_from_slice(&up);
                    }
                }
                (LayerSpec::Norm { axis, .. }, Cache::Norm { xhat, inv_std }) => {
                    let c = layer.in_shape[0];
                    let s = layer.in_shape[1] * layer.in_shape[2];
                    let gamma = &params[..c];
                    let (gg, gbeta) = g.split_at_mut(c);
                    let xh = &xhat[rows.start * in_len..rows.end * in_len];
                    for k in 0..r {
                        for ch in 0..c {
                            let base = (k * c + ch) * s;
                            for j in base..base + s {
                                gg[ch] += up[j] * xh[j];
                                gbeta[ch] += up[j];
                            }
                        }
                    }
                    if need_dx {
                        match axis {
                            NormAxis::Batch => {
                                for k in 0..r {
                                    for ch in 0..c {
                                        let f = gamma[ch] * inv_std[ch];
                                        let base = (k * c + ch) * s;
                                        for j in base..base + s {
                                            dx[j] = up[j] * f;
                                        }
                                    }
                                }
                            }
                            NormAxis::Feature => {
                                let m = (c * s) as f64;
                                for k in 0..r {
                                    let is = inv_std[rows.start + k];
                                    let base = k * in_len;
                                    let mut sum1 = 0.0;
                                    let mut sum2 = 0.0;
                                    for (ch, &g) in gamma[..c].iter().enumerate() {
                                        for j in base + ch * s..base + (ch + 1) * s {
                                            let d = up[j] * g;
                                            sum1 += d;
                                            sum2 += d * xh[j];
                                        }
                                    }
                                    for (ch, &g) in gamma[..c].iter().enumerate() {
                                        for j in base + ch * s..base + (ch + 1) * s {
                                            let d = up[j] * g;
                                            dx[j] = is / m * (m * d - sum1 - xh[j] * sum2);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (spec, _) => unreachable!("cache mismatch for {spec:?}"),
            }
            if !need_dx {
                break;
            }
            up = dx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stages(m: &Model) -> Vec<LayerSpec> {
        m.layer_specs()
            .into_iter()
            .filter(|s| !matches!(s, LayerSpec::Activation(_)))
            .collect()
    }

    #[test]
    fn mnist_cnn_chain() {
        let m = build_model(Arch::MnistCnn, &ModelOptions::new(ActivationKind::Relu, None), &mut Rng::new(1)).unwrap();
        let s = stages(&m);
        assert_eq!(s.len(), 6);
        assert!(matches!(s[0], LayerSpec::Conv { filters: 16, kernel: 8, stride: 2, .. }));
        assert!(matches!(s[1], LayerSpec::MaxPool { kernel: 2, .. }));
        assert!(matches!(s[2], LayerSpec::Conv { filters: 32, kernel: 4, stride: 2, .. }));
        assert!(matches!(s[3], LayerSpec::MaxPool { kernel: 2, .. }));
        assert_eq!(s[4], LayerSpec::Dense { units: 32 });
        assert_eq!(s[5], LayerSpec::Softmax { units: 10 });
        let shapes = m.layer_shapes();
        assert_eq!(shapes[0], [16, 14, 14]);
        assert_eq!(shapes[3], [32, 5, 5]);
        assert_eq!(shapes[5], [32, 4, 4]);
        assert_eq!(m.num_params(), 1040 + 8224 + 16416 + 330);
    }

    #[test]
    fn cifar_cnn_chain_with_bounded_relu() {
        let opts = ModelOptions::new(ActivationKind::BoundedRelu, Some(4.0));
        let m = build_model(Arch::Cifar10Cnn, &opts, &mut Rng::new(1)).unwrap();
        let convs: Vec<usize> = m
            .layer_specs()
            .iter()
            .filter_map(|s| match s {
                LayerSpec::Conv { filters, kernel: 3, stride: 1, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![32, 64, 128, 256]);
        let acts: Vec<Activation> = m
            .layer_specs()
            .iter()
            .filter_map(|s| match s {
                LayerSpec::Activation(a) => Some(*a),
                _ => None,
            })
            .collect();
        assert_eq!(acts.len(), 5);
        assert!(acts.iter().all(|a| a.bound() == Some(4.0)));
        let s = stages(&m);
        assert_eq!(s[s.len() - 2], LayerSpec::Dense { units: 32 });
        assert_eq!(s[s.len() - 1], LayerSpec::Softmax { units: 10 });
    }

    #[test]
    fn missing_bound_is_config_error() {
        let opts = ModelOptions::new(ActivationKind::BoundedRelu, None);
        assert!(matches!(
            build_model(Arch::MnistCnn, &opts, &mut Rng::new(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn norm_and_dropout_placement() {
        let mut opts = ModelOptions::new(ActivationKind::Relu, None);
        opts.norm = Some(NormChoice {
            kind: NormKind::BatchNorm,
            axis: NormAxis::Batch,
        });
        opts.dropout = Some(0.5);
        let specs = arch_layers(Arch::MnistCnn, &opts).unwrap();
        let names: Vec<&str> = specs
            .iter()
            .map(|s| match s {
                LayerSpec::Conv { .. } => "conv",
                LayerSpec::MaxPool { .. } => "pool",
                LayerSpec::Dense { .. } => "dense",
                LayerSpec::Activation(_) => "act",
                LayerSpec::Norm { .. } => "norm",
                LayerSpec::Dropout { .. } => "drop",
                LayerSpec::Softmax { .. } => "softmax",
            })
            .collect();
        assert_eq!(
            names,
            [
                "conv", "act", "norm", "drop", "pool", "conv", "act", "norm", "drop", "pool", "dense", "act",
                "drop", "softmax"
            ]
        );
        opts.dropout = Some(1.0);
        assert!(arch_layers(Arch::MnistCnn, &opts).is_err());
    }

    #[test]
    fn probabilities_sum_to_one_and_zero_model_is_uniform() {
        let mut rng = Rng::new(3);
        let mut m = build_model(Arch::MnistCnn, &ModelOptions::new(ActivationKind::Tanh, None), &mut rng).unwrap();
        let x = crate::tensor::gaussian(&mut rng, &[5, 1, 28, 28], 0.5, 0.3).unwrap();
        let out = m.forward(&x, &mut rng).unwrap();
        for i in 0..5 {
            let s: f64 = out.probabilities.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        m.params_mut().fill(0.0);
        let p = m.predict(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || build_model(Arch::MnistCnn, &ModelOptions::new(ActivationKind::Relu, None), &mut Rng::new(8)).unwrap();
        let x = crate::tensor::gaussian(&mut Rng::new(2), &[3, 1, 28, 28], 0.0, 1.0).unwrap();
        let a = build().forward(&x, &mut Rng::new(0)).unwrap();
        let b = build().forward(&x, &mut Rng::new(0)).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn wrong_batch_shape_is_dimension_error() {
        let m = build_model(Arch::MnistCnn, &ModelOptions::new(ActivationKind::Relu, None), &mut Rng::new(8)).unwrap();
        let x = Tensor::zeros(&[2, 3, 28, 28]);
        assert!(matches!(m.predict(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn eval_tape_rejects_backward() {
        let mut m = build_model(Arch::MnistCnn, &ModelOptions::new(ActivationKind::Relu, None), &mut Rng::new(8)).unwrap();
        m.set_mode(Mode::Eval);
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let out = m.forward(&x, &mut Rng::new(1)).unwrap();
        assert!(matches!(m.backward_per_sample(&out, &[1, 2]), Err(Error::State(_))));
    }
}
