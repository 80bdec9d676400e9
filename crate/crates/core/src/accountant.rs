//! Per-step Rényi bounds for the subsampled Gaussian mechanism.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln_binomial, log_sum_exp};
use crate::quadrature::{subsampled_gaussian_divergence, QuadratureSpec};

/// Which space sensitivities and noise are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivitySpace {
    /// Raw clipped-gradient space: Δ ≤ C, noise std σ·C.
    Raw,
    /// After dividing by the normalizer L: Δ ≤ C/L, noise std σ·C/L.
    Normalized,
}

/// Description of one DP-SGD step as a subsampled Gaussian mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    /// Noise standard deviation in raw update space (noise multiplier times clip).
    pub sigma: f64,
    /// Inclusion probability of the tracked point.
    pub q: f64,
    /// Clip norm C.
    pub clip: f64,
    /// Normalizer L.
    pub normalizer: f64,
}

impl MechanismParams {
    pub fn new(sigma: f64, q: f64, clip: f64, normalizer: f64) -> Result<Self> {
        let p = Self {
            sigma,
            q,
            clip,
            normalizer,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds the parameters from a noise multiplier rather than a raw std.
    pub fn from_multiplier(noise_multiplier: f64, q: f64, clip: f64, normalizer: f64) -> Result<Self> {
        Self::new(noise_multiplier * clip, q, clip, normalizer)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::domain("sigma must be positive and finite"));
        }
        check_q(self.q)?;
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(Error::domain("clip must be positive and finite"));
        }
        if !(self.normalizer >= 1.0) || !self.normalizer.is_finite() {
            return Err(Error::domain("normalizer must be at least 1"));
        }
        Ok(())
    }

    /// Data-independent maximum sensitivity in the given space.
    pub fn max_sensitivity(&self, space: SensitivitySpace) -> f64 {
        match space {
            SensitivitySpace::Raw => self.clip,
            SensitivitySpace::Normalized => self.clip / self.normalizer,
        }
    }

    /// Noise standard deviation in the given space.
    pub fn noise_std(&self, space: SensitivitySpace) -> f64 {
        match space {
            SensitivitySpace::Raw => self.sigma,
            SensitivitySpace::Normalized => self.sigma / self.normalizer,
        }
    }
}

/// A Rényi order together with the integer order used by per-step formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenyiOrder {
    pub alpha: f64,
    pub integer_alpha: u32,
}

impl RenyiOrder {
    pub fn new(alpha: f64) -> Result<Self> {
        Ok(Self {
            alpha,
            integer_alpha: ceil_order(alpha)?,
        })
    }
}

/// Direction of a per-instance divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `D(M(X) ‖ M(X'))`.
    XToXprime,
    /// `D(M(X') ‖ M(X))`.
    XprimeToX,
    /// Maximum over both directions.
    Max,
}

/// One per-step Rényi bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerStepBound {
    pub order: RenyiOrder,
    pub epsilon: f64,
    pub direction: Direction,
}

/// An (ε, δ) guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("sampling rate {q} outside [0, 1]")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!(
            "sigma {sigma} must be positive and finite"
        )));
    }
    Ok(())
}

fn check_sensitivity(delta_u: f64) -> Result<()> {
    if !(delta_u >= 0.0) || !delta_u.is_finite() {
        return Err(Error::domain(format!(
            "sensitivity {delta_u} must be finite and nonnegative"
        )));
    }
    Ok(())
}

/// Rényi-DP of the subsampled Gaussian mechanism at integer order `alpha` for
/// a point with sensitivity `delta_u`, inclusion probability `q` and noise std
/// `sigma` (all in the same space).
///
/// The binomial series is accumulated in log space. When every exponent is
/// moderate the sum is instead formed as `1 + Σ b_k·expm1(x_k)` so that tiny
/// divergences keep full relative precision.
pub fn sgm_rdp_bound(alpha: u32, q: f64, delta_u: f64, sigma: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::domain(format!("order {alpha} must be at least 2")));
    }
    check_q(q)?;
    check_sensitivity(delta_u)?;
    check_sigma(sigma)?;
    if q == 0.0 || delta_u == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return gaussian_rdp(alpha as f64, delta_u, sigma);
    }
    let a = alpha as f64;
    let c = delta_u * delta_u / (2.0 * sigma * sigma);
    let ln_q = q.ln();
    let ln_1q = (-q).ln_1p();
    let log_weight = |k: u32| ln_binomial(alpha, k) + (alpha - k) as f64 * ln_1q + k as f64 * ln_q;
    let expo = |k: u32| {
        let kf = k as f64;
        c * (kf * kf - kf)
    };
    let eps = if c * (a * a - a) <= 700.0 {
        let excess: f64 = (2..=alpha).map(|k| log_weight(k).exp() * expo(k).exp_m1()).sum();
        excess.ln_1p() / (a - 1.0)
    } else {
        let terms: Vec<f64> = (0..=alpha).map(|k| log_weight(k) + expo(k)).collect();
        log_sum_exp(&terms) / (a - 1.0)
    };
    if !eps.is_finite() {
        return Err(Error::Overflow(format!(
            "subsampled Gaussian series at order {alpha}, q={q}, delta={delta_u}, sigma={sigma}"
        )));
    }
    Ok(eps.max(0.0))
}

/// Per-step bound at the data-independent maximum sensitivity.
pub fn baseline_sgm_rdp(alpha: u32, params: &MechanismParams, space: SensitivitySpace) -> Result<f64> {
    params.validate()?;
    sgm_rdp_bound(
        alpha,
        params.q,
        params.max_sensitivity(space),
        params.noise_std(space),
    )
}

/// Per-instance per-step bound at a possibly fractional order, ceiled first.
pub fn per_step_bound(
    alpha: f64,
    params: &MechanismParams,
    space: SensitivitySpace,
    delta_u: f64,
    direction: Direction,
) -> Result<PerStepBound> {
    params.validate()?;
    let order = RenyiOrder::new(alpha)?;
    let epsilon = sgm_rdp_bound(order.integer_alpha, params.q, delta_u, params.noise_std(space))?;
    Ok(PerStepBound {
        order,
        epsilon,
        direction,
    })
}

/// Rényi-DP of the Gaussian mechanism: `αΔ²/(2σ²)`.
pub fn gaussian_rdp(alpha: f64, delta_u: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::domain(format!("order {alpha} must exceed 1")));
    }
    check_sensitivity(delta_u)?;
    check_sigma(sigma)?;
    Ok(alpha * delta_u * delta_u / (2.0 * sigma * sigma))
}

/// Converts an RDP guarantee to (ε, δ)-DP via `ε + ln(1/δ)/(α−1)`.
pub fn rdp_to_dp(alpha: f64, epsilon_rdp: f64, delta: f64) -> Result<DpGuarantee> {
    if !(alpha > 1.0) {
        return Err(Error::domain(format!("order {alpha} must exceed 1")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta {delta} outside (0, 1)")));
    }
    if !(epsilon_rdp >= 0.0) {
        return Err(Error::domain("RDP epsilon must be nonnegative"));
    }
    Ok(DpGuarantee {
        epsilon: epsilon_rdp + (1.0 / delta).ln() / (alpha - 1.0),
        delta,
    })
}

/// Smallest integer order that is at least `alpha` and at least 2.
pub fn ceil_order(alpha: f64) -> Result<u32> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("order {alpha} must exceed 1")));
    }
    if alpha > u32::MAX as f64 {
        return Err(Error::domain(format!("order {alpha} too large")));
    }
    Ok((alpha.ceil() as u32).max(2))
}

/// Weak triangle inequality bound on `D_α(A ‖ C)` from `D_{2α}(A ‖ B)` and `D_{2α−1}(B ‖ C)`.
pub fn weak_triangle(alpha: f64, d_two_alpha: f64, d_two_alpha_minus_one: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::domain(format!("order {alpha} must exceed 1")));
    }
    if !(d_two_alpha >= 0.0) || !(d_two_alpha_minus_one >= 0.0) {
        return Err(Error::domain("divergences must be nonnegative"));
    }
    Ok((alpha - 0.5) / (alpha - 1.0) * d_two_alpha + d_two_alpha_minus_one)
}

/// Quadrature value of `D_α(q N(Δ,σ²) + (1−q) N(0,σ²) ‖ N(0,σ²))`.
pub fn mixture_divergence_oracle(
    alpha: u32,
    q: f64,
    delta_u: f64,
    sigma: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::domain(format!("order {alpha} must be at least 2")));
    }
    subsampled_gaussian_divergence(alpha as f64, q, delta_u, sigma, spec)
}
