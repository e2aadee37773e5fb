//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For integer orders the subsampled-Gaussian moment is evaluated as
//! `1 + S` with
//! `S = sum_{k>=2} C(a,k) (1-q)^(a-k) q^k (exp(k(k-1)/(2 s^2)) - 1)`,
//! which is the binomial expansion after subtracting the `k = 0, 1` terms
//! (their exponential factor is 1). Every term of `S` is non-negative, so
//! the sum is taken in log space without cancellation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default RDP orders.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0];
    orders.extend((2..=64).map(f64::from));
    orders.sort_by(f64::total_cmp);
    orders.dedup();
    orders
}

/// RDP of the Gaussian mechanism with noise multiplier `sigma` at order `alpha`.
pub fn rdp_gaussian(sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!("sigma must be positive and finite, got {sigma}")));
    }
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::arg(format!("RDP order must be finite and > 1, got {alpha}")));
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::arg(format!("sampling rate must be in [0, 1], got {q}")));
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(exp(x) - 1)` for `x > 0`.
fn log_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// RDP of the Poisson-subsampled Gaussian at integer order `alpha >= 2`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    check_q(q)?;
    if alpha < 2 {
        return Err(Error::arg(format!("integer RDP order must be >= 2, got {alpha}")));
    }
    let a = f64::from(alpha);
    let full = rdp_gaussian(sigma, a)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(full);
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    // ln C(alpha, k), built incrementally
    let mut ln_binom = a.ln();
    let mut log_s = f64::NEG_INFINITY;
    for k in 2..=alpha {
        let kf = f64::from(k);
        ln_binom += ((a - kf + 1.0) / kf).ln();
        let term = ln_binom + (a - kf) * ln_1mq + kf * ln_q + log_expm1(kf * (kf - 1.0) * inv_2s2);
        log_s = log_add(log_s, term);
    }
    // ln(1 + S)
    let ln_moment = if log_s < 0.0 {
        log_s.exp().ln_1p()
    } else {
        log_s + (-log_s).exp().ln_1p()
    };
    Ok(ln_moment / (a - 1.0))
}

/// RDP of the subsampled Gaussian at any order `alpha > 1`.
///
/// Fractional orders are bounded above through convexity of
/// `g(a) = (a - 1) RDP(a)`: linear interpolation between the bracketing
/// integers, with `g(1) = 0`.
pub fn rdp_at_order(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    check_q(q)?;
    let full = rdp_gaussian(sigma, alpha)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(full);
    }
    if alpha.fract() == 0.0 {
        return rdp_subsampled_gaussian(q, sigma, alpha as u32);
    }
    let lo = alpha.floor();
    let hi = lo + 1.0;
    let g_lo = if lo < 2.0 {
        0.0
    } else {
        (lo - 1.0) * rdp_subsampled_gaussian(q, sigma, lo as u32)?
    };
    let g_hi = (hi - 1.0) * rdp_subsampled_gaussian(q, sigma, hi as u32)?;
    let t = alpha - lo;
    Ok(((1.0 - t) * g_lo + t * g_hi) / (alpha - 1.0))
}

/// Total RDP at each order of a fixed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RdpCurve {
    orders: Vec<f64>,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn zero(orders: &[f64]) -> Result<Self> {
        if let Some(&bad) = orders.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
            return Err(Error::arg(format!("RDP order must be finite and > 1, got {bad}")));
        }
        Ok(Self {
            orders: orders.to_vec(),
            values: vec![0.0; orders.len()],
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Add `steps` compositions of the subsampled Gaussian. A zero noise
    /// multiplier with data touched makes the curve infinite.
    pub fn add_phase(&mut self, phase: &Phase) -> Result<()> {
        if phase.steps == 0 || phase.q == 0.0 {
            return Ok(());
        }
        for (v, &a) in self.values.iter_mut().zip(&self.orders) {
            *v += if phase.sigma == 0.0 {
                f64::INFINITY
            } else {
                phase.steps as f64 * rdp_at_order(phase.q, phase.sigma, a)?
            };
        }
        Ok(())
    }

    /// Pointwise sum of two curves on the same grid.
    pub fn combine(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::arg("cannot add RDP curves over different orders"));
        }
        Ok(RdpCurve {
            orders: self.orders.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        })
    }

    /// Smallest `(epsilon, order)` over the grid for the given `delta`.
    pub fn to_epsilon(&self, delta: f64) -> Result<(f64, f64)> {
        to_epsilon(self, delta)
    }
}

/// Convert an RDP curve to `(epsilon, best order)` at `delta`.
///
/// Uses `eps = min_a RDP(a) + ln(1/delta)/(a-1)`. Ties go to the larger order.
pub fn to_epsilon(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::arg(format!("delta must be in (0, 1), got {delta}")));
    }
    if curve.orders.is_empty() {
        return Err(Error::arg("RDP curve has no orders"));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, curve.orders[curve.orders.len() - 1]);
    for (&a, &v) in curve.orders.iter().zip(&curve.values) {
        let eps = v + log_inv_delta / (a - 1.0);
        if eps < best.0 || (eps == best.0 && a > best.1) {
            best = (eps, a);
        }
    }
    Ok(best)
}

/// `steps` iterations at sampling rate `q` and noise multiplier `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

impl Phase {
    pub fn new(q: f64, sigma: f64, steps: u64) -> Result<Self> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::arg(format!("phase sampling rate must be in (0, 1], got {q}")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::arg(format!("phase sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { q, sigma, steps })
    }
}

/// Ordered record of the mechanisms a training run has applied.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivacyLedger {
    phases: Vec<Phase>,
    delta: f64,
    orders: Vec<f64>,
}

impl PrivacyLedger {
    pub fn new(delta: f64) -> Result<Self> {
        Self::with_orders(delta, default_orders())
    }

    pub fn with_orders(delta: f64, orders: Vec<f64>) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::arg(format!("delta must be in (0, 1), got {delta}")));
        }
        RdpCurve::zero(&orders)?;
        Ok(Self {
            phases: Vec::new(),
            delta,
            orders,
        })
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn push_phase(&mut self, q: f64, sigma: f64, steps: u64) -> Result<()> {
        self.phases.push(Phase::new(q, sigma, steps)?);
        Ok(())
    }

    /// Add steps to the most recent phase.
    pub fn extend_last(&mut self, steps: u64) -> Result<()> {
        let last = self
            .phases
            .last_mut()
            .ok_or_else(|| Error::State("ledger has no phase to extend".into()))?;
        last.steps += steps;
        Ok(())
    }

    pub fn curve(&self) -> Result<RdpCurve> {
        compose(self)
    }

    /// `(epsilon, best order)` at the ledger's delta.
    pub fn epsilon(&self) -> Result<(f64, f64)> {
        to_epsilon(&compose(self)?, self.delta)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.phases {
            w.serialize(p).map_err(|e| Error::Runtime(format!("writing ledger: {e}")))?;
        }
        if self.phases.is_empty() {
            w.write_record(["q", "sigma", "steps"])
                .map_err(|e| Error::Runtime(format!("writing ledger: {e}")))?;
        }
        w.flush().map_err(|e| Error::Runtime(format!("writing ledger: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, delta: f64) -> Result<Self> {
        let mut ledger = Self::new(delta)?;
        let mut r = csv::Reader::from_reader(input);
        for (i, row) in r.deserialize::<Phase>().enumerate() {
            let p = row.map_err(|e| Error::format("ledger csv", i as u64 + 1, e))?;
            ledger.push_phase(p.q, p.sigma, p.steps)?;
        }
        Ok(ledger)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path, delta: f64) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), delta)
    }
}

/// Total RDP curve of every phase in the ledger.
pub fn compose(ledger: &PrivacyLedger) -> Result<RdpCurve> {
    let mut curve = RdpCurve::zero(&ledger.orders)?;
    for p in &ledger.phases {
        curve.add_phase(p)?;
    }
    Ok(curve)
}

/// Epsilon after `steps` iterations of a single `(q, sigma)` mechanism.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<(f64, f64)> {
    let mut ledger = PrivacyLedger::new(delta)?;
    ledger.push_phase(q, sigma, steps)?;
    ledger.epsilon()
}
