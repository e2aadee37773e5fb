//! DPSGD and the plain SGD baseline.
//!
//! A DPSGD step clips every per-sample gradient to L2 norm `C`, sums the
//! clipped gradients, adds one Gaussian draw `N(0, sigma^2 C^2 I)` to the
//! sum, divides by the batch size and takes a gradient step.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accountant::PrivacyLedger;
use crate::data::{poisson_batches, poisson_epoch_len, shuffle_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{clip_factor, argmax, Mode, Model, PerSampleGradients};
use crate::rng::Rng;
use crate::tensor::{l2_norm_slice, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Each sample joins a batch independently with probability `b / N`.
    #[default]
    Poisson,
    /// A fresh permutation per epoch, cut into batches of `b`.
    Shuffle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpConfig {
    pub clip_c: f64,
    pub sigma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub delta: f64,
    pub sampling: Sampling,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_c: 1.0,
            sigma: 1.0,
            lr: 0.1,
            batch_size: 256,
            delta: 1e-5,
            sampling: Sampling::Poisson,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_c > 0.0) {
            return Err(Error::arg(format!("clipping threshold must be > 0, got {}", self.clip_c)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::arg(format!("noise multiplier must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::arg(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::arg(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub sampling: Sampling,
}

impl Default for PlainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch_size: 256,
            sampling: Sampling::Shuffle,
        }
    }
}

impl PlainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::arg(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Scale every per-sample gradient to norm at most `clip_c`.
pub fn clip_per_sample(g: &PerSampleGradients, clip_c: f64) -> Result<PerSampleGradients> {
    if !(clip_c > 0.0) {
        return Err(Error::arg(format!("clipping threshold must be > 0, got {clip_c}")));
    }
    let dim = g.dim();
    let mut out = g.as_slice().to_vec();
    if dim > 0 {
        for (row, &norm) in out.chunks_mut(dim).zip(g.norms()) {
            let f = clip_factor(norm, clip_c);
            if f != 1.0 {
                for v in row {
                    *v *= f;
                }
            }
        }
    }
    PerSampleGradients::new(g.batch_size(), dim, out)
}

fn add_noise_and_average(sum: &mut [f64], sigma: f64, clip_c: f64, denom: f64, rng: &mut Rng) {
    let std = sigma * clip_c;
    for v in sum.iter_mut() {
        if std > 0.0 {
            *v += std * rng.standard_normal();
        }
        *v /= denom;
    }
}

/// `(sum of clipped gradients + N(0, sigma^2 C^2 I)) / b`.
pub fn noisy_aggregate(clipped: &PerSampleGradients, sigma: f64, clip_c: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::arg(format!("noise multiplier must be >= 0, got {sigma}")));
    }
    if clipped.batch_size() == 0 {
        return Err(Error::arg("cannot average an empty batch"));
    }
    let mut sum = clipped.sum();
    add_noise_and_average(&mut sum, sigma, clip_c, clipped.batch_size() as f64, rng);
    Ok(Tensor::from_vec(sum))
}

/// Per-step diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub batch_size: usize,
    pub loss: f64,
    pub mean_preclip_norm: f64,
    pub max_preclip_norm: f64,
    pub clip_fraction: f64,
    pub correct: usize,
}

fn norm_metrics(norms: &[f64], clip_c: f64) -> (f64, f64, f64) {
    if norms.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let clipped = norms.iter().filter(|&&v| v > clip_c).count() as f64 / n;
    (mean, max, clipped)
}

fn count_correct(logits: &Tensor, labels: &[u8]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y as usize)
        .count()
}

/// One DPSGD update of `model` in place.
///
/// An empty batch (possible under Poisson sampling) still releases noise,
/// averaged over the configured batch size.
pub fn dpsgd_step(model: &mut Model, x: &Tensor, labels: &[u8], cfg: &DpConfig, rng: &mut Rng) -> Result<StepMetrics> {
    cfg.validate()?;
    if model.mode() != Mode::Train {
        return Err(Error::State("DPSGD step needs a model in training mode".into()));
    }
    let mut dropout_rng = rng.split();
    let mut noise_rng = rng.split();
    let n = labels.len();
    let mut sum = vec![0.0; model.num_params()];
    let mut metrics = StepMetrics {
        batch_size: n,
        ..StepMetrics::default()
    };
    if n > 0 {
        let fwd = model.forward(x, &mut dropout_rng)?;
        let (norms, loss) = model.backward_clipped_sum(&fwd, labels, cfg.clip_c, &mut sum)?;
        let (mean, max, frac) = norm_metrics(&norms, cfg.clip_c);
        metrics.loss = loss;
        metrics.mean_preclip_norm = mean;
        metrics.max_preclip_norm = max;
        metrics.clip_fraction = frac;
        metrics.correct = count_correct(&fwd.logits, labels);
    }
    let denom = if n > 0 { n } else { cfg.batch_size } as f64;
    add_noise_and_average(&mut sum, cfg.sigma, cfg.clip_c, denom, &mut noise_rng);
    for (p, g) in model.params_mut().iter_mut().zip(&sum) {
        *p -= cfg.lr * g;
    }
    Ok(metrics)
}

/// One plain minibatch SGD update on the mean cross-entropy loss.
pub fn sgd_step(model: &mut Model, x: &Tensor, labels: &[u8], cfg: &PlainConfig, rng: &mut Rng) -> Result<StepMetrics> {
    cfg.validate()?;
    if model.mode() != Mode::Train {
        return Err(Error::State("SGD step needs a model in training mode".into()));
    }
    // same stream layout as dpsgd_step so both see identical dropout masks
    let mut dropout_rng = rng.split();
    let _noise_rng = rng.split();
    let n = labels.len();
    if n == 0 {
        return Ok(StepMetrics::default());
    }
    let fwd = model.forward(x, &mut dropout_rng)?;
    let (grad, loss) = model.backward_batch(&fwd, labels)?;
    for (p, g) in model.params_mut().iter_mut().zip(&grad) {
        *p -= cfg.lr * g;
    }
    Ok(StepMetrics {
        batch_size: n,
        loss,
        mean_preclip_norm: l2_norm_slice(&grad),
        max_preclip_norm: l2_norm_slice(&grad),
        clip_fraction: 0.0,
        correct: count_correct(&fwd.logits, labels),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Dp(DpConfig),
    Plain(PlainConfig),
}

impl Optimizer {
    fn batch_size(&self) -> usize {
        match self {
            Optimizer::Dp(c) => c.batch_size,
            Optimizer::Plain(c) => c.batch_size,
        }
    }

    fn sampling(&self) -> Sampling {
        match self {
            Optimizer::Dp(c) => c.sampling,
            Optimizer::Plain(c) => c.sampling,
        }
    }
}

/// Noise multiplier and number of epochs of one training phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePhase {
    pub sigma: f64,
    pub epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub phase_sigma: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub epsilon: f64,
    pub mean_preclip_norm: f64,
    pub clip_fraction: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str =
        "epoch,phase_sigma,train_acc,test_acc,epsilon,mean_preclip_norm,clip_fraction";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.phase_sigma,
            self.train_acc,
            self.test_acc,
            self.epsilon,
            self.mean_preclip_norm,
            self.clip_fraction
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_acc)
    }

    pub fn final_epsilon(&self) -> Option<f64> {
        self.rows.last().map(|r| r.epsilon)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let err = |e: std::io::Error| Error::Runtime(format!("writing train log: {e}"));
        writeln!(out, "{}", TrainLogRow::CSV_HEADER).map_err(err)?;
        for r in &self.rows {
            writeln!(out, "{}", r.csv_line()).map_err(err)?;
        }
        out.flush().map_err(err)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<TrainLogRow>, _>>()
            .map_err(|e| Error::format(path.display(), e.position().map_or(0, |p| p.byte()), e))?;
        Ok(Self { rows })
    }
}

/// Test accuracy in evaluation mode, `chunk` samples at a time.
pub fn evaluate(model: &Model, data: &Dataset, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let (x, y) = data.batch(c);
        let out = model.forward_eval(&x)?;
        correct += count_correct(&out.logits, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Batches per epoch for a dataset of `n` samples.
pub fn steps_per_epoch(n: usize, batch_size: usize, sampling: Sampling) -> usize {
    match sampling {
        Sampling::Poisson => poisson_epoch_len(batch_size as f64 / n as f64),
        Sampling::Shuffle => n.div_ceil(batch_size),
    }
}

/// Train through every phase of `schedule`, recording one log row per epoch.
///
/// DP runs append one ledger phase per schedule entry; `epsilon` is taken
/// from the ledger after each epoch. Plain runs ignore the phase sigma and
/// report an infinite epsilon. `on_epoch` sees every row as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn train_with(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    opt: &Optimizer,
    schedule: &[SchedulePhase],
    ledger: &mut PrivacyLedger,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(&TrainLogRow) -> Result<()>,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if schedule.is_empty() {
        return Err(Error::arg("training schedule is empty"));
    }
    match opt {
        Optimizer::Dp(c) => c.validate()?,
        Optimizer::Plain(c) => c.validate()?,
    }
    let n = train.len();
    let b = opt.batch_size().min(n);
    let q = b as f64 / n as f64;
    let sampling = opt.sampling();
    let per_epoch = steps_per_epoch(n, b, sampling) as u64;
    model.set_mode(Mode::Train);
    let mut log = TrainLog::default();
    let mut epoch = 0;
    for phase in schedule {
        let step_cfg = match opt {
            Optimizer::Dp(c) => {
                ledger.push_phase(q, phase.sigma, 0)?;
                Optimizer::Dp(DpConfig {
                    sigma: phase.sigma,
                    batch_size: b,
                    ..*c
                })
            }
            Optimizer::Plain(c) => Optimizer::Plain(PlainConfig { batch_size: b, ..*c }),
        };
        for _ in 0..phase.epochs {
            epoch += 1;
            let epoch_rng = rng.split();
            let batches: Box<dyn Iterator<Item = Vec<usize>>> = match sampling {
                Sampling::Poisson => Box::new(poisson_batches(n, q, epoch_rng)?),
                Sampling::Shuffle => Box::new(shuffle_batches(n, b, epoch_rng)?),
            };
            let (mut seen, mut correct, mut norm_sum, mut clipped) = (0usize, 0usize, 0.0, 0.0);
            for idx in batches {
                let (x, y) = train.batch(&idx);
                let m = match &step_cfg {
                    Optimizer::Dp(c) => dpsgd_step(model, &x, &y, c, rng)?,
                    Optimizer::Plain(c) => sgd_step(model, &x, &y, c, rng)?,
                };
                seen += m.batch_size;
                correct += m.correct;
                norm_sum += m.mean_preclip_norm * m.batch_size as f64;
                clipped += m.clip_fraction * m.batch_size as f64;
            }
            if !model.params().iter().all(|v| v.is_finite()) {
                return Err(Error::Runtime(format!("parameters diverged during epoch {epoch}")));
            }
            let epsilon = match opt {
                Optimizer::Dp(_) => {
                    ledger.extend_last(per_epoch)?;
                    ledger.epsilon()?.0
                }
                Optimizer::Plain(_) => f64::INFINITY,
            };
            let denom = seen.max(1) as f64;
            let row = TrainLogRow {
                epoch,
                phase_sigma: match opt {
                    Optimizer::Dp(_) => phase.sigma,
                    Optimizer::Plain(_) => 0.0,
                },
                train_acc: correct as f64 / denom,
                test_acc: if test.is_empty() { f64::NAN } else { evaluate(model, test, 1000)? },
                epsilon,
                mean_preclip_norm: norm_sum / denom,
                clip_fraction: clipped / denom,
            };
            on_epoch(&row)?;
            log.rows.push(row);
        }
    }
    Ok(log)
}

/// [`train_with`] without a per-epoch callback.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test: &Dataset,
    opt: &Optimizer,
    schedule: &[SchedulePhase],
    ledger: &mut PrivacyLedger,
    rng: &mut Rng,
) -> Result<TrainLog> {
    train_with(model, train_set, test, opt, schedule, ledger, rng, &mut |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(rows: &[&[f64]]) -> PerSampleGradients {
        PerSampleGradients::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    #[test]
    fn clip_cases() {
        let g = grads(&[&[2.0, 0.0], &[0.3, 0.4], &[0.0, 0.0]]);
        let c = clip_per_sample(&g, 1.0).unwrap();
        assert_eq!(c.row(0), &[1.0, 0.0]);
        assert_eq!(c.row(1), &[0.3, 0.4]);
        assert_eq!(c.row(2), &[0.0, 0.0]);
        assert!(clip_per_sample(&g, 0.0).is_err());
        assert!(clip_per_sample(&g, -1.0).is_err());
    }

    #[test]
    fn noiseless_aggregate_is_mean() {
        let g = grads(&[&[1.0, 2.0], &[3.0, -2.0]]);
        let out = noisy_aggregate(&g, 0.0, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0]);
        assert!(noisy_aggregate(&g, -0.5, 1.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn aggregate_is_deterministic() {
        let g = grads(&[&[0.1, 0.2, 0.3]]);
        let a = noisy_aggregate(&g, 1.3, 1.0, &mut Rng::new(5)).unwrap();
        let b = noisy_aggregate(&g, 1.3, 1.0, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_lengths() {
        assert_eq!(steps_per_epoch(60000, 256, Sampling::Poisson), 235);
        assert_eq!(steps_per_epoch(60000, 256, Sampling::Shuffle), 235);
        assert_eq!(steps_per_epoch(1000, 256, Sampling::Shuffle), 4);
    }
}
