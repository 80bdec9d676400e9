//! Composition of per-step per-instance bounds over a training run.
//!
//! Earlier steps are charged at growing orders `g_p^i(α)` and their
//! data-dependent per-step divergences enter through an exponential moment
//! over independent training runs. The `p = 2` case has its own entry point.

use serde::{Deserialize, Serialize};

use crate::accountant::ceil_order;
use crate::error::{Error, Result};
use crate::math::{log_add_exp, log_mean_exp, mean_var, normal_critical};

/// Which form of the order map `g_p` to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpVariant {
    /// `(p/(p−1))α − 1/(p−1)`, the form the Hölder step produces.
    #[default]
    Proof,
    /// `(p/(p−1))α − 1/p`, kept for sensitivity comparisons.
    Statement,
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0) || p.is_nan() {
        return Err(Error::domain(format!("Hölder constant {p} must exceed 1")));
    }
    Ok(())
}

/// One application of the order map.
pub fn g_p_apply(p: f64, alpha: f64) -> Result<f64> {
    g_p_apply_variant(p, alpha, GpVariant::Proof)
}

pub fn g_p_apply_variant(p: f64, alpha: f64, variant: GpVariant) -> Result<f64> {
    check_p(p)?;
    if !(alpha > 1.0) {
        return Err(Error::domain(format!("order {alpha} must exceed 1")));
    }
    if p.is_infinite() {
        return Ok(alpha);
    }
    let shift = match variant {
        GpVariant::Proof => 1.0 / (p - 1.0),
        GpVariant::Statement => 1.0 / p,
    };
    Ok(p / (p - 1.0) * alpha - shift)
}

/// `[α, g_p(α), …, g_p^{n−1}(α)]`.
pub fn order_schedule(p: f64, alpha: u32, n: usize) -> Result<Vec<f64>> {
    order_schedule_variant(p, alpha, n, GpVariant::Proof)
}

pub fn order_schedule_variant(p: f64, alpha: u32, n: usize, variant: GpVariant) -> Result<Vec<f64>> {
    check_p(p)?;
    if alpha < 2 {
        return Err(Error::domain(format!("order {alpha} must be at least 2")));
    }
    if n == 0 {
        return Err(Error::domain("a schedule needs at least one step"));
    }
    let mut orders = Vec::with_capacity(n);
    orders.push(alpha as f64);
    for i in 1..n {
        let next = g_p_apply_variant(p, orders[i - 1], variant)?;
        if !next.is_finite() {
            return Err(Error::Overflow(format!("order schedule diverged at step {i}")));
        }
        orders.push(next);
    }
    Ok(orders)
}

/// Smallest `p ∈ {3n, 3n+1, …}` whose schedule ends at or below `2α`.
pub fn choose_p(n: usize, alpha: u32) -> f64 {
    let n = n.max(1);
    let alpha = alpha.max(2);
    let limit = 2.0 * alpha as f64;
    let mut p = 3 * n;
    loop {
        let pf = p as f64;
        let mut order = alpha as f64;
        for _ in 1..n {
            order = pf / (pf - 1.0) * order - 1.0 / (pf - 1.0);
        }
        if order <= limit {
            return pf;
        }
        p += 1;
    }
}

/// Hölder constant, base order and the order charged at each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionPlan {
    pub n: usize,
    pub p: f64,
    pub alpha: u32,
    /// `orders[i] = g_p^i(α)`; step `n − i` is charged at `orders[i]`.
    pub orders: Vec<f64>,
    pub variant: GpVariant,
}

impl CompositionPlan {
    pub fn new(n: usize, p: f64, alpha: u32) -> Result<Self> {
        Self::with_variant(n, p, alpha, GpVariant::Proof)
    }

    pub fn with_variant(n: usize, p: f64, alpha: u32, variant: GpVariant) -> Result<Self> {
        let orders = order_schedule_variant(p, alpha, n, variant)?;
        Ok(Self {
            n,
            p,
            alpha,
            orders,
            variant,
        })
    }

    /// Plan with `p` from [`choose_p`].
    pub fn auto(n: usize, alpha: u32) -> Result<Self> {
        Self::new(n, choose_p(n, alpha), alpha)
    }

    /// Order at which step `t` (1-based) is charged.
    pub fn order_for_step(&self, t: usize) -> f64 {
        self.orders[self.n - t]
    }

    /// Integer order used to evaluate per-step bounds for step `t`.
    pub fn integer_order_for_step(&self, t: usize) -> u32 {
        ceil_order(self.order_for_step(t)).expect("schedule orders exceed 1")
    }

    /// `(p−1)^i / p^{i+1}`, the weight of the term for step `n − i`.
    pub fn weight(&self, i: usize) -> f64 {
        if self.p.is_infinite() {
            return if i == 0 { 1.0 } else { 0.0 };
        }
        (i as f64 * (-1.0 / self.p).ln_1p()).exp() / self.p
    }

    /// `((p−1)/p)^{n−1}`, the weight of the first-step term.
    pub fn final_weight(&self) -> f64 {
        if self.p.is_infinite() {
            return if self.n == 1 { 1.0 } else { 0.0 };
        }
        ((self.n - 1) as f64 * (-1.0 / self.p).ln_1p()).exp()
    }

    /// Largest order any step is charged at.
    pub fn max_order(&self) -> f64 {
        *self.orders.last().expect("plans have at least one step")
    }
}

/// Per-step divergence draws for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSamples {
    pub run_id: String,
    /// `values[t − 2]` is the divergence for step `t`, conditioned on the run's prefix.
    pub values: Vec<f64>,
    /// Checkpoint identifiers the values were conditioned on, parallel to `values`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<String>,
}

/// Rectangular run × step matrix of conditional per-step divergences for steps `2..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSampleMatrix {
    pub n: usize,
    /// `orders[t − 2]` is the order the samples of step `t` were evaluated at.
    pub orders: Vec<f64>,
    pub runs: Vec<RunSamples>,
}

impl StepSampleMatrix {
    /// Matrix whose orders follow `plan`'s schedule.
    pub fn for_plan(plan: &CompositionPlan, runs: Vec<RunSamples>) -> Self {
        let orders = (2..=plan.n).map(|t| plan.order_for_step(t)).collect();
        Self {
            n: plan.n,
            orders,
            runs,
        }
    }

    fn validate(&self, plan: &CompositionPlan, cap: Option<f64>) -> Result<()> {
        if self.n != plan.n {
            return Err(Error::MissingSamples(format!(
                "sample matrix covers {} steps, plan has {}",
                self.n, plan.n
            )));
        }
        if self.orders.len() != plan.n - 1 {
            return Err(Error::MissingSamples(format!(
                "sample matrix lists {} orders, plan needs {}",
                self.orders.len(),
                plan.n - 1
            )));
        }
        for t in 2..=plan.n {
            let want = plan.order_for_step(t);
            let got = self.orders[t - 2];
            if (got - want).abs() > 1e-9 * want {
                return Err(Error::MissingSamples(format!(
                    "step {t} sampled at order {got}, schedule requires {want}"
                )));
            }
        }
        if plan.n > 1 && self.runs.is_empty() {
            return Err(Error::MissingSamples("no runs supplied".into()));
        }
        for run in &self.runs {
            if run.values.len() != plan.n - 1 {
                return Err(Error::MissingSamples(format!(
                    "run {} has {} step samples, expected {}",
                    run.run_id,
                    run.values.len(),
                    plan.n - 1
                )));
            }
            for (k, &d) in run.values.iter().enumerate() {
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(Error::domain(format!(
                        "run {} step {}: divergence {d} must be finite and nonnegative",
                        run.run_id,
                        k + 2
                    )));
                }
                if let Some(c) = cap {
                    if d > c {
                        return Err(Error::BoundExceeded { value: d, bound: c });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Options for [`compose_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComposeOptions {
    /// Declared upper bound on every per-step sample; samples above it are rejected.
    pub cap: Option<f64>,
    /// Failure probability of the per-step confidence intervals.
    pub j: f64,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self { cap: None, j: 0.05 }
    }
}

/// Composed bound with its per-step decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionResult {
    pub total_epsilon: f64,
    /// `per_step_contributions[t − 1]` is the weighted term charged to step `t`.
    pub per_step_contributions: Vec<f64>,
    /// Half-widths of the per-step terms (0 for the deterministic first step).
    pub estimator_ci: Vec<f64>,
    /// Order each step was charged at.
    pub charged_orders: Vec<f64>,
}

/// Composed per-instance bound at order α.
pub fn compose(
    plan: &CompositionPlan,
    samples: &StepSampleMatrix,
    first_step_bound: f64,
) -> Result<CompositionResult> {
    compose_with(plan, samples, first_step_bound, &ComposeOptions::default())
}

/// [`compose`] with a sample cap and CI settings.
///
/// With a cap the per-step half-widths come from Hoeffding's inequality on
/// the exponential moments (bounded by `exp(k·cap)`); without one they use
/// the normal approximation across runs.
pub fn compose_with(
    plan: &CompositionPlan,
    samples: &StepSampleMatrix,
    first_step_bound: f64,
    opts: &ComposeOptions,
) -> Result<CompositionResult> {
    samples.validate(plan, opts.cap)?;
    if !(first_step_bound >= 0.0) || !first_step_bound.is_finite() {
        return Err(Error::domain("first-step bound must be finite and nonnegative"));
    }
    if !(opts.j > 0.0 && opts.j < 1.0) {
        return Err(Error::domain("confidence parameter J must be in (0, 1)"));
    }
    let n = plan.n;
    let a1 = plan.alpha as f64 - 1.0;
    let runs = samples.runs.len();
    let mut contributions = vec![0.0; n];
    let mut cis = vec![0.0; n];
    let mut expo = vec![0.0; runs];
    for i in 0..n.saturating_sub(1) {
        let t = n - i;
        let k = plan.p * (plan.orders[i] - 1.0);
        for (r, run) in samples.runs.iter().enumerate() {
            expo[r] = k * run.values[t - 2];
        }
        let lme = log_mean_exp(&expo);
        if !lme.is_finite() {
            return Err(Error::Overflow(format!("log-mean-exp overflow at step {t}")));
        }
        let scale = plan.weight(i) / a1;
        contributions[t - 1] = scale * lme;
        cis[t - 1] = scale * log_moment_halfwidth(&expo, lme, k, opts);
    }
    let g_last = plan.orders[n - 1];
    contributions[0] = plan.final_weight() * ((g_last - 1.0) / a1) * first_step_bound;
    let total = contributions.iter().sum();
    Ok(CompositionResult {
        total_epsilon: total,
        per_step_contributions: contributions,
        estimator_ci: cis,
        charged_orders: (1..=n).map(|t| plan.order_for_step(t)).collect(),
    })
}

/// Half-width, on the log scale, of the estimate `ln mean exp(expo)`.
fn log_moment_halfwidth(expo: &[f64], lme: f64, k: f64, opts: &ComposeOptions) -> f64 {
    let l = expo.len() as f64;
    match opts.cap {
        Some(cap) => {
            let s = ((2.0 / opts.j).ln() / (2.0 * l)).sqrt();
            log_add_exp(lme, k * cap + s.ln()) - lme
        }
        None => {
            if expo.len() < 2 {
                return 0.0;
            }
            let m = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let f: Vec<f64> = expo.iter().map(|e| (e - m).exp()).collect();
            let (mean, var) = mean_var(&f);
            normal_critical(1.0 - opts.j) * var.sqrt() / (mean * l.sqrt())
        }
    }
}

/// The `p = 2` composition with orders `2α − 1` iterated.
pub fn compose_cs(
    alpha: u32,
    per_step_samples: &StepSampleMatrix,
    first_step_bound: f64,
    n: usize,
) -> Result<CompositionResult> {
    let plan = CompositionPlan::new(n, 2.0, alpha)?;
    per_step_samples.validate(&plan, None)?;
    if !(first_step_bound >= 0.0) || !first_step_bound.is_finite() {
        return Err(Error::domain("first-step bound must be finite and nonnegative"));
    }
    let a1 = alpha as f64 - 1.0;
    let mut contributions = vec![0.0; n];
    let mut cis = vec![0.0; n];
    let mut g = alpha as f64;
    for i in 0..n.saturating_sub(1) {
        let t = n - i;
        let expo: Vec<f64> = per_step_samples
            .runs
            .iter()
            .map(|run| 2.0 * (g - 1.0) * run.values[t - 2])
            .collect();
        let lme = log_mean_exp(&expo);
        if !lme.is_finite() {
            return Err(Error::Overflow(format!("log-mean-exp overflow at step {t}")));
        }
        let w = 0.5f64.powi(i as i32 + 1);
        contributions[t - 1] = w * lme / a1;
        cis[t - 1] = w / a1 * log_moment_halfwidth(&expo, lme, 0.0, &ComposeOptions::default());
        g = 2.0 * g - 1.0;
    }
    // (1/2)^n · ln (e^{(g−1)·D})².
    contributions[0] = 0.5f64.powi(n as i32) * 2.0 * (g - 1.0) * first_step_bound / a1;
    Ok(CompositionResult {
        total_epsilon: contributions.iter().sum(),
        per_step_contributions: contributions,
        estimator_ci: cis,
        charged_orders: (1..=n).map(|t| plan.order_for_step(t)).collect(),
    })
}

/// Run count prescribed for estimating the exponential moments to accuracy
/// `c·e^{3(α−1)ε}` with failure probability `J`.
pub fn sample_size(j: f64, c: f64, alpha: f64, epsilon_step: f64, epsilon_prime_step: f64) -> Result<u64> {
    if !(j > 0.0 && j < 1.0) {
        return Err(Error::domain(format!("J = {j} outside (0, 1)")));
    }
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::domain(format!("c = {c} outside (0, 1]")));
    }
    if !(alpha > 1.0) {
        return Err(Error::domain(format!("order {alpha} must exceed 1")));
    }
    if !(epsilon_step >= 0.0) || !(epsilon_prime_step >= 0.0) {
        return Err(Error::domain("per-step guarantees must be nonnegative"));
    }
    let expo = 6.0 * (alpha - 1.0) * epsilon_step - 3.0 * (2.0 * alpha - 1.0) * epsilon_prime_step;
    let l = (-j.ln() / (c * c) * expo.exp()).ceil();
    if !l.is_finite() || l > u64::MAX as f64 {
        return Err(Error::Overflow(format!("sample size {l} not representable")));
    }
    Ok((l as u64).max(1))
}

/// Sample mean and Hoeffding half-width at confidence `1 − J` for draws in `[0, upper_bound]`.
pub fn estimate_mean_with_ci(samples: &[f64], upper_bound: f64, j: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::MissingSamples("no samples to average".into()));
    }
    if !(upper_bound >= 0.0) || !upper_bound.is_finite() {
        return Err(Error::domain("upper bound must be finite and nonnegative"));
    }
    if !(j > 0.0 && j < 1.0) {
        return Err(Error::domain(format!("J = {j} outside (0, 1)")));
    }
    for &s in samples {
        if !(s >= 0.0) {
            return Err(Error::domain(format!("sample {s} is negative")));
        }
        if s > upper_bound {
            return Err(Error::BoundExceeded {
                value: s,
                bound: upper_bound,
            });
        }
    }
    let l = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / l;
    Ok((mean, upper_bound * ((2.0 / j).ln() / (2.0 * l)).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(plan: &CompositionPlan, rows: Vec<Vec<f64>>) -> StepSampleMatrix {
        let runs = rows
            .into_iter()
            .enumerate()
            .map(|(r, values)| RunSamples {
                run_id: format!("r{r}"),
                values,
                checkpoints: Vec::new(),
            })
            .collect();
        StepSampleMatrix::for_plan(plan, runs)
    }

    #[test]
    fn g_p_examples() {
        assert_eq!(g_p_apply(2.0, 5.0).unwrap(), 9.0);
        assert!((g_p_apply(300.0, 8.0).unwrap() - 8.02341).abs() < 1e-5);
        assert!((g_p_apply(1e12, 8.0).unwrap() - 8.0).abs() < 1e-9);
        assert_eq!(g_p_apply(f64::INFINITY, 8.0).unwrap(), 8.0);
        let s = g_p_apply_variant(300.0, 8.0, GpVariant::Statement).unwrap();
        assert!((s - (300.0 / 299.0 * 8.0 - 1.0 / 300.0)).abs() < 1e-14);
        assert!(g_p_apply(1.0, 2.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(order_schedule(5.0, 3, 1).unwrap(), vec![3.0]);
        assert_eq!(order_schedule(2.0, 8, 3).unwrap(), vec![8.0, 15.0, 29.0]);
        let s = order_schedule(300.0, 8, 100).unwrap();
        assert!(*s.last().unwrap() <= 16.0);
        assert!(s.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn choose_p_examples() {
        assert_eq!(choose_p(100, 8), 300.0);
        assert_eq!(choose_p(1, 5), 3.0);
        assert_eq!(choose_p(2, 2), 6.0);
        assert!((g_p_apply(6.0, 2.0).unwrap() - 2.2).abs() < 1e-15);
    }

    #[test]
    fn choose_p_schedules_stay_below_twice_alpha() {
        for n in (1..=2000).chain([5000, 20_000, 100_000]) {
            for alpha in [2u32, 8, 32] {
                let p = choose_p(n, alpha);
                let s = order_schedule(p, alpha, n).unwrap();
                assert!(*s.last().unwrap() <= 2.0 * alpha as f64, "n={n} alpha={alpha}");
            }
        }
    }

    #[test]
    fn weights_sum_to_one() {
        for &(n, p) in &[
            (1usize, 3.0),
            (2, 2.0),
            (10, 2.0),
            (100, 300.0),
            (1000, 3000.0),
            (60, 1.5),
        ] {
            let plan = CompositionPlan::new(n, p, 8).unwrap();
            let s: f64 = (0..n - 1).map(|i| plan.weight(i)).sum::<f64>() + plan.final_weight();
            assert!((s - 1.0).abs() < 1e-12, "n={n} p={p} sum={s}");
        }
    }

    #[test]
    fn single_step_is_exact() {
        for alpha in [2u32, 3, 8, 17] {
            let plan = CompositionPlan::auto(1, alpha).unwrap();
            let m = matrix(&plan, vec![vec![]]);
            let r = compose(&plan, &m, 0.123_456_789).unwrap();
            assert_eq!(r.total_epsilon, 0.123_456_789);
            let r = compose_cs(alpha, &m, 0.123_456_789, 1).unwrap();
            assert_eq!(r.per_step_contributions.len(), 1);
        }
    }

    #[test]
    fn zero_inputs_give_zero() {
        let plan = CompositionPlan::auto(5, 8).unwrap();
        let m = matrix(&plan, vec![vec![0.0; 4]; 3]);
        let r = compose(&plan, &m, 0.0).unwrap();
        assert_eq!(r.total_epsilon, 0.0);
    }

    #[test]
    fn constant_samples_collapse_to_sum() {
        // With one run the step-(n−i) term is d·(g^i − 1)·((p−1)/p)^i·p/p/(α−1) = d.
        let plan = CompositionPlan::new(4, 10.0, 3).unwrap();
        let m = matrix(&plan, vec![vec![0.2, 0.2, 0.2]]);
        let r = compose(&plan, &m, 0.2).unwrap();
        for c in &r.per_step_contributions {
            assert!((c - 0.2).abs() < 1e-12, "{c}");
        }
    }

    #[test]
    fn missing_and_mismatched_samples_rejected() {
        let plan = CompositionPlan::new(3, 2.0, 8).unwrap();
        let mut m = matrix(&plan, vec![vec![0.1]]);
        assert!(matches!(compose(&plan, &m, 0.1), Err(Error::MissingSamples(_))));
        m = matrix(&plan, vec![vec![0.1, 0.2]]);
        m.orders[0] = 8.0;
        assert!(matches!(compose(&plan, &m, 0.1), Err(Error::MissingSamples(_))));
        let m = matrix(&plan, vec![vec![0.1, -0.2]]);
        assert!(matches!(compose(&plan, &m, 0.1), Err(Error::Domain(_))));
        let m = matrix(&plan, vec![vec![0.1, 0.5]]);
        let opts = ComposeOptions {
            cap: Some(0.3),
            ..ComposeOptions::default()
        };
        assert!(matches!(
            compose_with(&plan, &m, 0.1, &opts),
            Err(Error::BoundExceeded { .. })
        ));
    }

    #[test]
    fn cs_uses_doubling_schedule() {
        let plan = CompositionPlan::new(3, 2.0, 8).unwrap();
        assert_eq!(plan.orders, vec![8.0, 15.0, 29.0]);
        let m = matrix(&plan, vec![vec![0.1, 0.3], vec![0.05, 0.2]]);
        let a = compose(&plan, &m, 0.02).unwrap();
        let b = compose_cs(8, &m, 0.02, 3).unwrap();
        assert_eq!(b.charged_orders, vec![29.0, 15.0, 8.0]);
        assert!(((a.total_epsilon - b.total_epsilon) / a.total_epsilon).abs() < 1e-12);
    }

    #[test]
    fn sample_size_examples() {
        assert_eq!(sample_size((-1.0f64).exp(), 1.0, 4.0, 0.0, 0.0).unwrap(), 1);
        assert_eq!(sample_size(0.05, 0.1, 2.0, 0.1, 0.2).unwrap(), 91);
        let a = sample_size(0.05, 0.1, 2.0, 0.1, 0.2).unwrap();
        let b = sample_size(0.05, 0.1, 2.0, 0.1, 0.3).unwrap();
        assert!(b < a);
    }

    #[test]
    fn hoeffding_examples() {
        let (m, h) = estimate_mean_with_ci(&[0.3; 10], 1.0, 0.05).unwrap();
        assert!((m - 0.3).abs() < 1e-15);
        assert!((h - ((2.0f64 / 0.05).ln() / 20.0).sqrt()).abs() < 1e-15);
        let (_, h4) = estimate_mean_with_ci(&[0.3; 40], 1.0, 0.05).unwrap();
        assert!((h4 - h / 2.0).abs() < 1e-15);
        assert!(matches!(
            estimate_mean_with_ci(&[0.3, 1.2], 1.0, 0.05),
            Err(Error::BoundExceeded { .. })
        ));
    }

    proptest! {
        #[test]
        fn monotone_in_samples(
            vals in proptest::collection::vec(0.0f64..0.5, 9),
            bump in 0usize..9,
            first in 0.0f64..0.5,
        ) {
            let plan = CompositionPlan::auto(4, 4).unwrap();
            let rows: Vec<Vec<f64>> = vals.chunks(3).map(|c| c.to_vec()).collect();
            let base = compose(&plan, &matrix(&plan, rows.clone()), first).unwrap();
            let mut up = rows.clone();
            up[bump / 3][bump % 3] += 0.1;
            let r_up = compose(&plan, &matrix(&plan, up), first).unwrap();
            prop_assert!(r_up.total_epsilon >= base.total_epsilon - 1e-12);
            let r_first = compose(&plan, &matrix(&plan, rows), first + 0.1).unwrap();
            prop_assert!(r_first.total_epsilon >= base.total_epsilon);
            let s: f64 = base.per_step_contributions.iter().sum();
            prop_assert_eq!(s, base.total_epsilon);
            prop_assert!(base.per_step_contributions.iter().all(|&c| c >= 0.0));
        }

        #[test]
        fn cs_agrees_with_general_form(
            vals in proptest::collection::vec(0.0f64..0.3, 8),
            first in 0.0f64..0.3,
            alpha in 2u32..9,
        ) {
            let plan = CompositionPlan::new(5, 2.0, alpha).unwrap();
            let rows: Vec<Vec<f64>> = vals.chunks(4).map(|c| c.to_vec()).collect();
            let m = matrix(&plan, rows);
            let a = compose(&plan, &m, first).unwrap().total_epsilon;
            let b = compose_cs(alpha, &m, first, 5).unwrap().total_epsilon;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }
}
