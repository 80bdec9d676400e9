//! Grid quadrature for Rényi divergences between one-dimensional Gaussian mixtures.
//!
//! Used as an independent oracle for the closed-form per-step bounds. The
//! integrands are smooth and Gaussian-tailed, so the composite trapezoid rule
//! on a uniform grid converges very fast; convergence is checked by halving
//! the step until two successive estimates agree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_add_exp, log_sum_exp};

/// Grid settings for the quadrature oracles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Grid points per noise standard deviation at the coarsest level.
    pub points_per_sigma: usize,
    /// Extra margin, in standard deviations, beyond the outermost integrand mode.
    pub tail_sigmas: f64,
    /// Relative agreement required between successive refinements.
    pub tolerance: f64,
    /// Number of step halvings attempted before giving up.
    pub max_refinements: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            points_per_sigma: 8,
            tail_sigmas: 12.0,
            tolerance: 1e-10,
            max_refinements: 5,
        }
    }
}

impl QuadratureSpec {
    fn validate(&self) -> Result<()> {
        if self.points_per_sigma == 0 {
            return Err(Error::domain("points_per_sigma must be positive"));
        }
        if !(self.tail_sigmas >= 12.0) {
            return Err(Error::domain("quadrature window must extend at least 12 sigma"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::domain("quadrature tolerance must be positive"));
        }
        Ok(())
    }
}

/// Uniform grid over `[lo, hi]` with trapezoid weights folded in as logs.
fn grid(lo: f64, hi: f64, per_unit: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (((hi - lo) * per_unit as f64).ceil() as usize).max(2);
    let h = (hi - lo) / n as f64;
    let mut xs = Vec::with_capacity(n + 1);
    let mut lw = Vec::with_capacity(n + 1);
    for i in 0..=n {
        xs.push(lo + h * i as f64);
        let w = if i == 0 || i == n { 0.5 * h } else { h };
        lw.push(w.ln());
    }
    (xs, lw)
}

/// Repeats `eval(per_unit)` with doubling density until two results agree.
fn refine<F>(spec: &QuadratureSpec, what: &str, mut eval: F) -> Result<f64>
where
    F: FnMut(usize) -> f64,
{
    let mut per_unit = spec.points_per_sigma;
    let mut prev = eval(per_unit);
    for _ in 0..spec.max_refinements {
        per_unit *= 2;
        let next = eval(per_unit);
        if !next.is_finite() {
            return Err(Error::NonConvergence(format!("{what}: non-finite estimate")));
        }
        let scale = next.abs().max(prev.abs());
        if (next - prev).abs() <= spec.tolerance * scale + 1e-300 {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::NonConvergence(format!(
        "{what}: estimates still moving after {} refinements",
        spec.max_refinements
    )))
}

/// Divergence `D_α(q N(Δ,σ²) + (1−q) N(0,σ²) ‖ N(0,σ²))` by direct integration.
///
/// Works in standardized units `z = w/σ`. The integrand is written as
/// `φ(z)·(P/Q)(z)^α` with the likelihood ratio in `ln1p/expm1` form, and the
/// result is normalized by the same rule applied to `φ` alone, so `q = 0` and
/// `Δ = 0` integrate to exactly zero.
pub fn subsampled_gaussian_divergence(
    alpha: f64,
    q: f64,
    delta_u: f64,
    sigma: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    spec.validate()?;
    if !(alpha > 1.0) || !(sigma > 0.0) || !(0.0..=1.0).contains(&q) || !(delta_u >= 0.0) {
        return Err(Error::domain("invalid arguments to quadrature oracle"));
    }
    let d = delta_u / sigma;
    let ln_one_minus_q = (-q).ln_1p();
    let ln_q = q.ln();
    let log_ratio = |z: f64| -> f64 {
        let l = d * z - 0.5 * d * d;
        if l <= 700.0 {
            (q * l.exp_m1()).ln_1p()
        } else {
            log_add_exp(ln_one_minus_q, ln_q + l)
        }
    };
    let t = spec.tail_sigmas;
    let lo = -t;
    let hi = alpha * d + t;
    let eval = |per_unit: usize| -> f64 {
        let (zs, lw) = grid(lo, hi, per_unit);
        let log_phi: Vec<f64> = zs.iter().map(|z| -0.5 * z * z).collect();
        let expo: Vec<f64> = zs.iter().map(|&z| alpha * log_ratio(z)).collect();
        let max_expo = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_expo <= 700.0 {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..zs.len() {
                let w = (log_phi[i] + lw[i]).exp();
                num += w * expo[i].exp_m1();
                den += w;
            }
            (num / den).ln_1p() / (alpha - 1.0)
        } else {
            let terms: Vec<f64> = (0..zs.len()).map(|i| log_phi[i] + lw[i] + expo[i]).collect();
            let base: Vec<f64> = (0..zs.len()).map(|i| log_phi[i] + lw[i]).collect();
            (log_sum_exp(&terms) - log_sum_exp(&base)) / (alpha - 1.0)
        }
    };
    refine(spec, "subsampled Gaussian divergence", eval)
}

/// `D_α(P ‖ Q)` for finite Gaussian mixtures sharing the component scale `sigma`.
///
/// Each mixture is a list of `(weight, mean)` pairs; weights must be positive
/// and sum to one.
pub fn gaussian_mixture_divergence(
    p: &[(f64, f64)],
    q: &[(f64, f64)],
    sigma: f64,
    alpha: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    spec.validate()?;
    if !(alpha > 1.0) || !(sigma > 0.0) {
        return Err(Error::domain("alpha must exceed 1 and sigma must be positive"));
    }
    for mix in [p, q] {
        if mix.is_empty() || mix.iter().any(|&(w, m)| !(w > 0.0) || !m.is_finite()) {
            return Err(Error::domain("mixture weights must be positive and means finite"));
        }
        let total: f64 = mix.iter().map(|&(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain("mixture weights must sum to one"));
        }
    }
    let std_p: Vec<(f64, f64)> = p.iter().map(|&(w, m)| (w.ln(), m / sigma)).collect();
    let std_q: Vec<(f64, f64)> = q.iter().map(|&(w, m)| (w.ln(), m / sigma)).collect();
    let means = std_p.iter().chain(std_q.iter()).map(|&(_, m)| m);
    let m_lo = means.clone().fold(f64::INFINITY, f64::min);
    let m_hi = means.fold(f64::NEG_INFINITY, f64::max);
    let range = m_hi - m_lo;
    let lo = m_lo - (alpha - 1.0) * range - spec.tail_sigmas;
    let hi = m_hi + (alpha - 1.0) * range + spec.tail_sigmas;
    let log_density = |mix: &[(f64, f64)], z: f64| -> f64 {
        mix.iter()
            .map(|&(lw, m)| lw - 0.5 * (z - m) * (z - m))
            .fold(f64::NEG_INFINITY, log_add_exp)
    };
    let eval = |per_unit: usize| -> f64 {
        let (zs, lw) = grid(lo, hi, per_unit);
        let terms: Vec<f64> = zs
            .iter()
            .zip(&lw)
            .map(|(&z, &w)| w + alpha * log_density(&std_p, z) + (1.0 - alpha) * log_density(&std_q, z))
            .collect();
        let base: Vec<f64> = zs
            .iter()
            .zip(&lw)
            .map(|(&z, &w)| w + log_density(&std_q, z))
            .collect();
        (log_sum_exp(&terms) - log_sum_exp(&base)) / (alpha - 1.0)
    };
    refine(spec, "Gaussian mixture divergence", eval)
}
