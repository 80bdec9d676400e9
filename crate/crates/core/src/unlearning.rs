//! Keep-or-retrain ledger for adaptive unlearning with per-instance divergences.
//!
//! The served model stays `A(D^s)` from the last retrain `s` while the weak
//! triangle inequality keeps its divergence to `A(D^t)` under the budget β.

use serde::{Deserialize, Serialize};

use crate::accountant::weak_triangle;
use crate::error::{Error, Result};

/// Relative slack of the budget comparison, absorbing decimal-to-binary rounding of inputs.
pub const BUDGET_ROUNDING: f64 = 4.0 * f64::EPSILON;

/// Which keep-condition coefficient to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientVariant {
    /// `(α − ½)/(α − 1)`.
    #[default]
    Proof,
    /// `(α − 1)/(α − 2)`; needs α > 2.
    Text,
}

pub fn keep_coefficient(alpha: f64, variant: CoefficientVariant) -> Result<f64> {
    match variant {
        CoefficientVariant::Proof => {
            if !(alpha > 1.0) {
                return Err(Error::domain(format!("order {alpha} must exceed 1")));
            }
            Ok((alpha - 0.5) / (alpha - 1.0))
        }
        CoefficientVariant::Text => {
            if !(alpha > 2.0) {
                return Err(Error::domain(format!(
                    "the (α−1)/(α−2) coefficient needs α > 2, got {alpha}"
                )));
            }
            Ok((alpha - 1.0) / (alpha - 2.0))
        }
    }
}

/// Highest order of `D(served ‖ A(D^{t−1}))` needed after `t` kept requests: `2^t·α`.
pub fn recursive_order_requirement(alpha: u32, t: u32) -> Result<f64> {
    let r = alpha as f64 * 2f64.powi(t as i32);
    if !r.is_finite() {
        return Err(Error::Overflow(format!(
            "order 2^{t}·{alpha} is not representable"
        )));
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Retrain,
}

/// One processed deletion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEntry {
    pub request_id: String,
    /// 1-based position in the request sequence.
    pub t: usize,
    pub decision: Decision,
    /// `D_{2α}(served ‖ A(D^{t−1}))`.
    pub d_high: f64,
    /// `D_{2α−1}(A(D^{t−1}) ‖ A(D^t))`.
    pub d_step: f64,
    pub triangle_sum: f64,
    /// Bound on `D_α(served ‖ A(D^t))` after the decision.
    pub guarantee: f64,
    pub beta: f64,
}

/// Per-request divergences between consecutive retrain targets.
pub trait DivergenceSource {
    /// Number of requests the source can describe.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// An upper bound on `D_order(A(D^{request}) ‖ A(D^{request+1}))`, 0-based `request`.
    fn divergence(&self, request: usize, order: f64) -> Result<f64>;
}

/// Divergences measured at a finite menu of orders.
///
/// A query is answered with the smallest measured order at or above it, which
/// is valid because Rényi divergences are nondecreasing in the order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderMenu {
    pub request_id: String,
    /// `(order, divergence)` pairs.
    pub divergences: Vec<(f64, f64)>,
}

impl OrderMenu {
    pub fn validate(&self) -> Result<()> {
        for &(o, d) in &self.divergences {
            if !(o >= 1.0) || !o.is_finite() {
                return Err(Error::InvalidData(format!(
                    "request {}: order {o} must be at least 1",
                    self.request_id
                )));
            }
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::InvalidData(format!(
                    "request {}: divergence {d} must be finite and nonnegative",
                    self.request_id
                )));
            }
        }
        Ok(())
    }

    pub fn lookup(&self, order: f64) -> Option<f64> {
        self.divergences
            .iter()
            .filter(|(o, _)| *o >= order * (1.0 - 1e-12))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|&(_, d)| d)
    }
}

impl DivergenceSource for [OrderMenu] {
    fn len(&self) -> usize {
        <[OrderMenu]>::len(self)
    }

    fn divergence(&self, request: usize, order: f64) -> Result<f64> {
        let menu = self.get(request).ok_or(Error::SourceExhausted(request))?;
        menu.lookup(order).ok_or(Error::MissingOrder { request, order })
    }
}

impl DivergenceSource for Vec<OrderMenu> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn divergence(&self, request: usize, order: f64) -> Result<f64> {
        self.as_slice().divergence(request, order)
    }
}

/// A source defined by a function of `(request, order)`.
pub struct FnSource<F> {
    pub len: usize,
    pub f: F,
}

impl<F: Fn(usize, f64) -> f64> DivergenceSource for FnSource<F> {
    fn len(&self) -> usize {
        self.len
    }

    fn divergence(&self, request: usize, order: f64) -> Result<f64> {
        if request >= self.len {
            return Err(Error::SourceExhausted(request));
        }
        Ok((self.f)(request, order))
    }
}

/// Budget, order and decision history of one served model lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningLedger {
    pub beta: f64,
    pub alpha: u32,
    /// NPIU's additive slack, always 0.
    pub gamma: f64,
    pub variant: CoefficientVariant,
    pub entries: Vec<DecisionEntry>,
    /// Request count at the last retrain (0 for the initial training).
    pub last_retrain_index: usize,
    /// 0-based indices of requests kept since the last retrain.
    kept_since_retrain: Vec<usize>,
}

impl UnlearningLedger {
    pub fn new(beta: f64, alpha: u32) -> Result<Self> {
        Self::with_variant(beta, alpha, CoefficientVariant::Proof)
    }

    pub fn with_variant(beta: f64, alpha: u32, variant: CoefficientVariant) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::domain(format!("budget {beta} must be positive")));
        }
        if alpha < 2 {
            return Err(Error::domain(format!("order {alpha} must be at least 2")));
        }
        keep_coefficient(alpha as f64, variant)?;
        Ok(Self {
            beta,
            alpha,
            gamma: 0.0,
            variant,
            entries: Vec::new(),
            last_retrain_index: 0,
            kept_since_retrain: Vec::new(),
        })
    }

    /// Requests kept since the served model was trained.
    pub fn kept_since_retrain(&self) -> usize {
        self.kept_since_retrain.len()
    }

    /// Decides one request from its two divergences.
    pub fn npiu_step(&mut self, request_id: impl Into<String>, d_high: f64, d_step: f64) -> Result<Decision> {
        for (name, v) in [("d_high", d_high), ("d_step", d_step)] {
            if !(v >= 0.0) || v.is_nan() {
                return Err(Error::domain(format!("{name} = {v} must be nonnegative")));
            }
        }
        let coef = keep_coefficient(self.alpha as f64, self.variant)?;
        let sum = coef * d_high + d_step;
        let t = self.entries.len() + 1;
        let (decision, guarantee) = if sum <= self.beta * (1.0 + BUDGET_ROUNDING) {
            (Decision::Keep, sum)
        } else {
            (Decision::Retrain, 0.0)
        };
        self.entries.push(DecisionEntry {
            request_id: request_id.into(),
            t,
            decision,
            d_high,
            d_step,
            triangle_sum: sum,
            guarantee,
            beta: self.beta,
        });
        match decision {
            Decision::Keep => self.kept_since_retrain.push(t - 1),
            Decision::Retrain => {
                self.last_retrain_index = t;
                self.kept_since_retrain.clear();
            }
        }
        Ok(decision)
    }

    /// Bound on `D_order(served ‖ A(D^{k_m}))` for the first `m` kept requests.
    fn chained_bound<S: DivergenceSource + ?Sized>(&self, source: &S, order: f64, m: usize) -> Result<f64> {
        match m {
            0 => Ok(0.0),
            1 => source.divergence(self.kept_since_retrain[0], order),
            _ => {
                let higher = self.chained_bound(source, 2.0 * order, m - 1)?;
                let step = source.divergence(self.kept_since_retrain[m - 1], 2.0 * order - 1.0)?;
                weak_triangle(order, higher, step)
            }
        }
    }

    /// Current `D_{2α}(served ‖ A(D^{t−1}))` bound assembled from the source.
    pub fn d_high<S: DivergenceSource + ?Sized>(&self, source: &S) -> Result<f64> {
        self.chained_bound(source, 2.0 * self.alpha as f64, self.kept_since_retrain.len())
    }

    /// Processes request `request` (0-based) of `source`.
    pub fn process<S: DivergenceSource + ?Sized>(
        &mut self,
        source: &S,
        request: usize,
        request_id: impl Into<String>,
    ) -> Result<Decision> {
        if request >= source.len() {
            return Err(Error::SourceExhausted(request));
        }
        let d_high = self.d_high(source)?;
        let d_step = source.divergence(request, 2.0 * self.alpha as f64 - 1.0)?;
        self.npiu_step(request_id, d_high, d_step)
    }
}

/// Runs every request of `source` through `ledger` and returns the decision log.
pub fn simulate_request_stream<S: DivergenceSource + ?Sized>(
    ledger: &mut UnlearningLedger,
    source: &S,
    request_ids: &[String],
) -> Result<Vec<DecisionEntry>> {
    let start = ledger.entries.len();
    for (i, id) in request_ids.iter().enumerate() {
        ledger.process(source, start + i, id.clone())?;
    }
    Ok(ledger.entries[start..].to_vec())
}
