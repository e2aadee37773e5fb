//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use dpsgd_lab::nn::{Activation, LayerSpec, Model};
use dpsgd_lab::{Rng, Tensor};

const PREC: usize = 512;
const RM: RoundingMode = RoundingMode::ToEven;

/// Direct binomial summation at 512-bit precision; no log-space tricks.
pub fn oracle_rdp(q: f64, sigma: f64, alpha: u32) -> f64 {
    let mut cc = Consts::new().unwrap();
    let bq = BigFloat::from_f64(q, PREC);
    let one = BigFloat::from_f64(1.0, PREC);
    let p = one.sub(&bq, PREC, RM);
    let two_s2 = BigFloat::from_f64(2.0 * sigma * sigma, PREC);
    let mut total = BigFloat::from_f64(0.0, PREC);
    let mut binom = BigFloat::from_f64(1.0, PREC);
    for k in 0..=alpha {
        if k > 0 {
            binom = binom
                .mul(&BigFloat::from_f64(f64::from(alpha - k + 1), PREC), PREC, RM)
                .div(&BigFloat::from_f64(f64::from(k), PREC), PREC, RM);
        }
        let expo = BigFloat::from_f64(f64::from(k) * f64::from(k.saturating_sub(1)), PREC)
            .div(&two_s2, PREC, RM)
            .exp(PREC, RM, &mut cc);
        let term = binom
            .mul(&p.powi((alpha - k) as usize, PREC, RM), PREC, RM)
            .mul(&bq.powi(k as usize, PREC, RM), PREC, RM)
            .mul(&expo, PREC, RM);
        total = total.add(&term, PREC, RM);
    }
    let r = total
        .ln(PREC, RM, &mut cc)
        .div(&BigFloat::from_f64(f64::from(alpha - 1), PREC), PREC, RM);
    let s = r.format(Radix::Dec, RM, &mut cc).unwrap();
    s.parse().unwrap()
}

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor so coordinates whose true gradient is ~0 are judged
/// on absolute error.
pub const REL_FLOOR: f64 = 1e-5;

fn loss_of(model: &Model, x: &Tensor, labels: &[u8], sample: usize, seed: u64) -> f64 {
    let mut m = model.clone();
    let out = m.forward(x, &mut Rng::new(seed)).unwrap();
    m.sample_losses(&out, labels)[sample]
}

/// Maximum relative error over every coordinate of every sample.
pub fn max_rel_error(model: &Model, x: &Tensor, labels: &[u8]) -> f64 {
    let seed = 99;
    let mut m = model.clone();
    let out = m.forward(x, &mut Rng::new(seed)).unwrap();
    let (grads, _) = model.backward_per_sample(&out, labels).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..labels.len() {
        for j in 0..model.num_params() {
            let mut plus = model.clone();
            plus.params_mut()[j] += H;
            let mut minus = model.clone();
            minus.params_mut()[j] -= H;
            let numeric = (loss_of(&plus, x, labels, i, seed) - loss_of(&minus, x, labels, i, seed)) / (2.0 * H);
            let analytic = grads.row(i)[j];
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

/// The MNIST chain with widths shrunk below 200 parameters.
pub fn shrunk_mnist_specs(act: Activation) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            filters: 2,
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        LayerSpec::Activation(act),
        LayerSpec::MaxPool { kernel: 2, stride: 1 },
        LayerSpec::Conv {
            filters: 2,
            kernel: 2,
            stride: 2,
            padding: 0,
        },
        LayerSpec::Activation(act),
        LayerSpec::MaxPool { kernel: 2, stride: 1 },
        LayerSpec::Dense { units: 4 },
        LayerSpec::Activation(act),
        LayerSpec::Softmax { units: 3 },
    ]
}

