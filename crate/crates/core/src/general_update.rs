//! Per-step per-instance bounds for arbitrary update rules, estimated from
//! draws of minibatch updates.
//!
//! For an update rule `U` with Gaussian noise σ the divergence
//! `D_α(M(X') ‖ M(X))` is at most
//! `(1/(α−1))·E_v[ ln E_{u₁..u_α}[ exp(−Δ_{U,α}(u, v)/(2σ²)) ] ]`
//! where `v` is an update on a minibatch of `X` and `u₁..u_α` are iid updates
//! on minibatches of `X'`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accountant::{Direction, PerStepBound, RenyiOrder};
use crate::error::{Error, Result};
use crate::math::{log_mean_exp, log_sum_exp, mean_var, normal_critical};

/// Confidence level of the normal-approximation interval around nested estimates.
pub const NESTED_CI_LEVEL: f64 = 0.99;

/// Outer and inner sample counts used by the reference protocol.
pub const DEFAULT_DRAWS: usize = 20;

/// An update in parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UpdateVector(pub Vec<f64>);

impl UpdateVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }
}

impl From<Vec<f64>> for UpdateVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Source of iid minibatch updates `U(X_B)` for a fixed dataset and checkpoint.
pub trait UpdateSampler {
    fn dim(&self) -> usize;
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> UpdateVector;
}

/// Finitely many updates with known probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteUpdates {
    atoms: Vec<(f64, UpdateVector)>,
    index: WeightedIndex<f64>,
}

impl DiscreteUpdates {
    pub fn new(atoms: Vec<(f64, UpdateVector)>) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::domain("discrete update distribution needs an atom"))?;
        let dim = first.1.dim();
        for (p, u) in &atoms {
            if u.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: u.dim(),
                });
            }
            if !(*p > 0.0) || u.0.iter().any(|x| !x.is_finite()) {
                return Err(Error::domain(
                    "atom probabilities must be positive and updates finite",
                ));
            }
        }
        let total: f64 = atoms.iter().map(|(p, _)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("atom probabilities sum to {total}")));
        }
        let index =
            WeightedIndex::new(atoms.iter().map(|(p, _)| *p)).map_err(|e| Error::domain(e.to_string()))?;
        Ok(Self { atoms, index })
    }

    /// Equally likely updates.
    pub fn uniform(updates: Vec<UpdateVector>) -> Result<Self> {
        let p = 1.0 / updates.len() as f64;
        Self::new(updates.into_iter().map(|u| (p, u)).collect())
    }

    /// A single update drawn with probability one.
    pub fn point(u: UpdateVector) -> Self {
        Self::new(vec![(1.0, u)]).expect("a single finite atom is valid")
    }

    pub fn atoms(&self) -> &[(f64, UpdateVector)] {
        &self.atoms
    }
}

impl UpdateSampler for DiscreteUpdates {
    fn dim(&self) -> usize {
        self.atoms[0].1.dim()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> UpdateVector {
        self.atoms[self.index.sample(rng)].1.clone()
    }
}

/// `Δ_α` together with the scalar `Δ_{U,α}` for one tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaTupleStat {
    pub delta_alpha_vec: Vec<f64>,
    pub delta_u_alpha: f64,
}

fn check_tuple(tuple: &[UpdateVector], single: &UpdateVector) -> Result<()> {
    if tuple.len() < 2 {
        return Err(Error::domain(format!(
            "tuple of length {} needs at least 2 updates",
            tuple.len()
        )));
    }
    for u in tuple {
        if u.dim() != single.dim() {
            return Err(Error::DimensionMismatch {
                expected: single.dim(),
                found: u.dim(),
            });
        }
    }
    Ok(())
}

/// `Σ uᵢ − (α−1)·v`.
pub fn delta_alpha(tuple: &[UpdateVector], single: &UpdateVector) -> Result<Vec<f64>> {
    check_tuple(tuple, single)?;
    let a1 = tuple.len() as f64 - 1.0;
    let mut out: Vec<f64> = single.0.iter().map(|v| -a1 * v).collect();
    for u in tuple {
        for (o, x) in out.iter_mut().zip(&u.0) {
            *o += x;
        }
    }
    Ok(out)
}

/// `Σ‖uᵢ‖² − (α−1)‖v‖² − ‖Δ_α‖²`.
pub fn delta_u_alpha(tuple: &[UpdateVector], single: &UpdateVector) -> Result<f64> {
    Ok(alpha_tuple_stat(tuple, single)?.delta_u_alpha)
}

pub fn alpha_tuple_stat(tuple: &[UpdateVector], single: &UpdateVector) -> Result<AlphaTupleStat> {
    let d = delta_alpha(tuple, single)?;
    // Centered at v the statistic is Σ‖wᵢ‖² − ‖Σwᵢ‖² with wᵢ = uᵢ − v,
    // which is exactly 0 when every uᵢ equals v.
    let mut sum_w = vec![0.0; single.dim()];
    let mut sq = 0.0;
    for u in tuple {
        for ((acc, x), v) in sum_w.iter_mut().zip(&u.0).zip(&single.0) {
            let w = x - v;
            *acc += w;
            sq += w * w;
        }
    }
    let sum_sq: f64 = sum_w.iter().map(|x| x * x).sum();
    Ok(AlphaTupleStat {
        delta_u_alpha: sq - sum_sq,
        delta_alpha_vec: d,
    })
}

/// Nested Monte Carlo estimate of the bound with its normal-approximation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub epsilon: f64,
    /// Standard error from the spread of the outer terms.
    pub std_error: f64,
    /// Half-width at [`NESTED_CI_LEVEL`].
    pub ci_halfwidth: f64,
    pub m_outer: usize,
    pub m_inner: usize,
}

impl McEstimate {
    /// Half-width at another confidence level.
    pub fn halfwidth_at(&self, confidence: f64) -> f64 {
        normal_critical(confidence) * self.std_error
    }
}

fn check_order_sigma(alpha: u32, sigma: f64) -> Result<()> {
    if alpha < 2 {
        return Err(Error::domain(format!(
            "order {alpha} must be an integer of at least 2"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma {sigma} must be positive")));
    }
    Ok(())
}

/// Estimates `D_α(M(X') ‖ M(X))` where `outer` draws updates on `X` and `inner` on `X'`.
pub fn mc_divergence_bound<O, I>(
    outer: &O,
    inner: &I,
    alpha: u32,
    sigma: f64,
    m_outer: usize,
    m_inner: usize,
    seed: u64,
) -> Result<McEstimate>
where
    O: UpdateSampler + ?Sized,
    I: UpdateSampler + ?Sized,
{
    check_order_sigma(alpha, sigma)?;
    if m_outer == 0 || m_inner == 0 {
        return Err(Error::domain("sample counts must be positive"));
    }
    if outer.dim() != inner.dim() {
        return Err(Error::DimensionMismatch {
            expected: outer.dim(),
            found: inner.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two_var = 2.0 * sigma * sigma;
    let a1 = alpha as f64 - 1.0;
    let mut outer_terms = Vec::with_capacity(m_outer);
    let mut expo = Vec::with_capacity(m_inner);
    let mut tuple = Vec::with_capacity(alpha as usize);
    for _ in 0..m_outer {
        let v = outer.draw(&mut rng);
        expo.clear();
        for _ in 0..m_inner {
            tuple.clear();
            for _ in 0..alpha {
                tuple.push(inner.draw(&mut rng));
            }
            expo.push(-delta_u_alpha(&tuple, &v)? / two_var);
        }
        let lme = log_mean_exp(&expo);
        if !lme.is_finite() {
            return Err(Error::Overflow("inner log-mean-exp is not finite".into()));
        }
        outer_terms.push(lme / a1);
    }
    let (mean, var) = mean_var(&outer_terms);
    let se = (var / m_outer as f64).sqrt();
    Ok(McEstimate {
        epsilon: mean,
        std_error: se,
        ci_halfwidth: normal_critical(NESTED_CI_LEVEL) * se,
        m_outer,
        m_inner,
    })
}

/// Exact value of the bound for finite update distributions, by enumerating
/// every outer atom and every α-tuple of inner atoms.
pub fn enumerate_divergence_bound(
    outer: &DiscreteUpdates,
    inner: &DiscreteUpdates,
    alpha: u32,
    sigma: f64,
) -> Result<f64> {
    check_order_sigma(alpha, sigma)?;
    if outer.dim() != inner.dim() {
        return Err(Error::DimensionMismatch {
            expected: outer.dim(),
            found: inner.dim(),
        });
    }
    let m = inner.atoms().len();
    let count = (m as f64).powi(alpha as i32);
    if count > 1e7 {
        return Err(Error::domain(format!("{count} tuples is too many to enumerate")));
    }
    let two_var = 2.0 * sigma * sigma;
    let a1 = alpha as f64 - 1.0;
    let mut total = 0.0;
    let mut idx = vec![0usize; alpha as usize];
    let mut terms = Vec::with_capacity(count as usize);
    for (pv, v) in outer.atoms() {
        terms.clear();
        idx.iter_mut().for_each(|i| *i = 0);
        loop {
            let tuple: Vec<UpdateVector> = idx.iter().map(|&i| inner.atoms()[i].1.clone()).collect();
            let log_p: f64 = idx.iter().map(|&i| inner.atoms()[i].0.ln()).sum();
            terms.push(log_p - delta_u_alpha(&tuple, v)? / two_var);
            // Advance the mixed-radix counter.
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] < m {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
        total += pv * log_sum_exp(&terms) / a1;
    }
    Ok(total)
}

/// Both directional estimates and their maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralBound {
    /// Estimate of `D(M(X') ‖ M(X))`.
    pub xprime_to_x: McEstimate,
    /// Estimate of `D(M(X) ‖ M(X'))`.
    pub x_to_xprime: McEstimate,
    pub bound: PerStepBound,
}

impl GeneralBound {
    /// The directional estimate that attains the maximum.
    pub fn dominant(&self) -> &McEstimate {
        if self.xprime_to_x.epsilon >= self.x_to_xprime.epsilon {
            &self.xprime_to_x
        } else {
            &self.x_to_xprime
        }
    }
}

/// Estimates both directions and reports their maximum.
pub fn per_instance_bound_general<A, B>(
    sampler_x: &A,
    sampler_xprime: &B,
    alpha: u32,
    sigma: f64,
    m_outer: usize,
    m_inner: usize,
    seed: u64,
) -> Result<GeneralBound>
where
    A: UpdateSampler + ?Sized,
    B: UpdateSampler + ?Sized,
{
    let forward = mc_divergence_bound(sampler_x, sampler_xprime, alpha, sigma, m_outer, m_inner, seed)?;
    let reverse = mc_divergence_bound(
        sampler_xprime,
        sampler_x,
        alpha,
        sigma,
        m_outer,
        m_inner,
        seed ^ 0x9E37_79B9_7F4A_7C15,
    )?;
    Ok(GeneralBound {
        xprime_to_x: forward,
        x_to_xprime: reverse,
        bound: PerStepBound {
            order: RenyiOrder::new(alpha as f64)?,
            epsilon: forward.epsilon.max(reverse.epsilon).max(0.0),
            direction: Direction::Max,
        },
    })
}

/// Exact counterpart of [`per_instance_bound_general`] for finite distributions.
pub fn enumerate_bound_general(
    x: &DiscreteUpdates,
    xprime: &DiscreteUpdates,
    alpha: u32,
    sigma: f64,
) -> Result<f64> {
    let a = enumerate_divergence_bound(x, xprime, alpha, sigma)?;
    let b = enumerate_divergence_bound(xprime, x, alpha, sigma)?;
    Ok(a.max(b))
}
