//! Per-instance (ε, δ) bounds for the subsampled Gaussian mechanism from
//! moments of the sensitivity distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::log_mean_exp;

/// Largest log-value representable as a finite `f64`.
const LOG_MAX: f64 = 709.782_712_893_384;

/// The δ bookkeeping of the per-instance bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSplit {
    /// δ of the underlying Gaussian mechanism.
    pub delta: f64,
    /// δ' spent on the Hölder case split.
    pub delta_prime: f64,
    /// Final δ'' = q·δ + δ'.
    pub delta_double_prime: f64,
}

impl DeltaSplit {
    pub fn new(q: f64, delta: f64, delta_prime: f64) -> Result<Self> {
        check_unit_open(delta, "delta")?;
        check_unit_open(delta_prime, "delta_prime")?;
        check_q(q)?;
        let ddp = q * delta + delta_prime;
        check_unit_open(ddp, "delta_double_prime")?;
        Ok(Self {
            delta,
            delta_prime,
            delta_double_prime: ddp,
        })
    }

    /// Splits a target δ'' in half between δ' and q·δ.
    pub fn halved(q: f64, delta_double_prime: f64) -> Result<Self> {
        check_unit_open(delta_double_prime, "delta_double_prime")?;
        if !(q > 0.0) {
            return Err(Error::domain("a halved split needs q > 0"));
        }
        let delta_prime = 0.5 * delta_double_prime;
        Self::new(q, delta_prime / q, delta_prime)
    }
}

/// Draws of the per-instance sensitivity over sampled minibatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySamples {
    values: Vec<f64>,
}

impl SensitivitySamples {
    /// Validates the draws; `clip`, when given, is an upper bound every draw must respect.
    pub fn new(values: Vec<f64>, clip: Option<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::MissingSamples("sensitivity sample list is empty".into()));
        }
        for &v in &values {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::domain(format!(
                    "sensitivity sample {v} must be finite and nonnegative"
                )));
            }
            if let Some(c) = clip {
                if v > c {
                    return Err(Error::BoundExceeded { value: v, bound: c });
                }
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }
}

/// Hölder exponent p in (1, ∞).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderExponent(f64);

impl HolderExponent {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(Error::domain(format!("Hölder exponent {p} must be in (1, inf)")));
        }
        Ok(Self(p))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

fn check_unit_open(x: f64, name: &str) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::domain(format!("{name} = {x} outside (0, 1)")));
    }
    Ok(())
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("sampling rate {q} outside [0, 1]")));
    }
    Ok(())
}

/// Gaussian-mechanism constant `sqrt(2 ln(1.25/δ))/σ`.
pub fn gauss_dp_constant(delta: f64, sigma: f64) -> Result<f64> {
    check_unit_open(delta, "delta")?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma {sigma} must be positive")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / sigma)
}

/// `ln (mean exp(c·Δ·p))^{1/p}`.
pub fn log_holder_moment(samples: &SensitivitySamples, p: HolderExponent, c: f64) -> Result<f64> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::domain(format!(
            "constant {c} must be finite and nonnegative"
        )));
    }
    let p = p.get();
    let expo: Vec<f64> = samples.values().iter().map(|&d| c * d * p).collect();
    if expo.iter().any(|e| !e.is_finite()) {
        return Err(Error::Overflow("c·Δ·p is not finite".into()));
    }
    let lme = log_mean_exp(&expo);
    if !lme.is_finite() {
        return Err(Error::Overflow("log-mean-exp of c·Δ·p is not finite".into()));
    }
    Ok(lme / p)
}

/// `(mean exp(c·Δ·p))^{1/p}`; multiply by q to obtain a_p.
pub fn holder_moment(samples: &SensitivitySamples, p: HolderExponent, c: f64) -> Result<f64> {
    let l = log_holder_moment(samples, p, c)?;
    if l > LOG_MAX {
        return Err(Error::Overflow(format!("Hölder moment e^{l} exceeds f64 range")));
    }
    Ok(l.exp())
}

/// Per-instance (ε', δ'') for the direction `P(M(X') ∈ S) ≤ e^{ε'} P(M(X) ∈ S) + δ''`.
pub fn per_instance_eps_delta(
    q: f64,
    delta: f64,
    delta_prime: f64,
    p: HolderExponent,
    samples: &SensitivitySamples,
    sigma: f64,
) -> Result<(f64, f64)> {
    let split = DeltaSplit::new(q, delta, delta_prime)?;
    let c = gauss_dp_constant(delta, sigma)?;
    let lhm = log_holder_moment(samples, p, c)?;
    let pv = p.get();
    let ln_1q = (-q).ln_1p();
    let eps = if q == 0.0 {
        0.0
    } else {
        let ln_ap = q.ln() + lhm;
        let first = pv / (pv - 1.0) * ln_ap - delta_prime.ln() / (pv - 1.0);
        crate::math::log_add_exp(first, ln_1q)
    };
    if !eps.is_finite() {
        return Err(Error::Overflow("per-instance epsilon is not finite".into()));
    }
    Ok((eps, split.delta_double_prime))
}

/// Data-independent amplified bound `ln(q·e^{c·Δ_max} + 1 − q)`.
pub fn classical_amplified_eps(q: f64, c: f64, delta_u_max: f64) -> Result<f64> {
    check_q(q)?;
    if !(c >= 0.0) || !(delta_u_max >= 0.0) {
        return Err(Error::domain("constant and sensitivity must be nonnegative"));
    }
    let x = c * delta_u_max;
    let v = if x <= 700.0 {
        (q * x.exp_m1()).ln_1p()
    } else {
        crate::math::log_add_exp(q.ln() + x, (-q).ln_1p())
    };
    Ok(v)
}
