//! End-to-end accounting over simulator traces: per-step reports, composed
//! totals and mean-rule estimates at checkpoints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::accountant::ceil_order;
use crate::accountant::sgm_rdp_bound;
use crate::composition::estimate_mean_with_ci;
use crate::composition::{
    choose_p, compose_with, ComposeOptions, CompositionPlan, CompositionResult, GpVariant, RunSamples,
    StepSampleMatrix,
};
use crate::error::{Error, Result};
use crate::general_update::{per_instance_bound_general, GeneralBound};
use crate::simulator::{Dataset, MinibatchUpdates, RunTrace, TrainerConfig};
use crate::trace_io::{ReportRow, StepLabel, TraceRecord};

/// Failure probability of the Hoeffding intervals in per-step reports.
pub const REPORT_J: f64 = 0.05;

/// Flattens runs into trace records, one per (run, step, tracked point).
pub fn records_from_runs(runs: &[RunTrace], config: &TrainerConfig) -> Vec<TraceRecord> {
    let l = config.expected_batch as f64;
    let mut out = Vec::new();
    for run in runs {
        for rec in &run.records {
            for (i, id) in run.tracked_ids.iter().enumerate() {
                out.push(TraceRecord {
                    run_id: run.run_id.clone(),
                    step: rec.step,
                    point_id: id.clone(),
                    delta: rec.clipped_norms[i] / l,
                    delta_max: Some(config.delta_max()),
                    sigma_effective: config.sigma_effective(),
                    q: run.q,
                    orders: None,
                    correct: Some(rec.correct[i]),
                    extra: BTreeMap::new(),
                });
            }
        }
    }
    out
}

/// `point → run → records sorted by step`.
type Grouped<'a> = BTreeMap<&'a str, BTreeMap<&'a str, Vec<&'a TraceRecord>>>;

fn group(records: &[TraceRecord]) -> Result<Grouped<'_>> {
    let mut g: Grouped = BTreeMap::new();
    for r in records {
        r.validate()?;
        g.entry(r.point_id.as_str())
            .or_default()
            .entry(r.run_id.as_str())
            .or_default()
            .push(r);
    }
    for (point, runs) in g.iter_mut() {
        for (run, recs) in runs.iter_mut() {
            recs.sort_by_key(|r| r.step);
            for (i, r) in recs.iter().enumerate() {
                if r.step != i + 1 {
                    return Err(Error::InvalidData(format!(
                        "point {point} run {run}: steps are not contiguous from 1 (found {} at position {})",
                        r.step,
                        i + 1
                    )));
                }
            }
        }
    }
    Ok(g)
}

fn delta_max(r: &TraceRecord) -> Result<f64> {
    r.delta_max.ok_or_else(|| {
        Error::InvalidData(format!(
            "run {} step {} point {}: delta_max is needed for the baseline",
            r.run_id, r.step, r.point_id
        ))
    })
}

/// Mean that returns the common value exactly when all entries agree.
fn stable_mean(v: &[f64]) -> f64 {
    let x0 = v[0];
    x0 + v.iter().map(|x| x - x0).sum::<f64>() / v.len() as f64
}

/// Per-step bounds at order α for every tracked point, averaged over runs.
///
/// With more than one run the `ci` column is the Hoeffding half-width of
/// the run average (values lie in `[0, baseline]`).
pub fn account_traces(records: &[TraceRecord], alpha: u32) -> Result<Vec<ReportRow>> {
    let grouped = group(records)?;
    let mut rows = Vec::new();
    for (point, runs) in &grouped {
        let mut by_step: BTreeMap<usize, Vec<&TraceRecord>> = BTreeMap::new();
        for recs in runs.values() {
            for r in recs {
                by_step.entry(r.step).or_default().push(r);
            }
        }
        for (step, recs) in by_step {
            let mut ours = Vec::with_capacity(recs.len());
            let mut baseline: f64 = 0.0;
            for r in &recs {
                ours.push(sgm_rdp_bound(alpha, r.q, r.delta, r.sigma_effective)?);
                baseline = baseline.max(sgm_rdp_bound(alpha, r.q, delta_max(r)?, r.sigma_effective)?);
            }
            let mean = stable_mean(&ours);
            let ci = if ours.len() > 1 {
                Some(estimate_mean_with_ci(&ours, baseline, REPORT_J)?.1)
            } else {
                None
            };
            rows.push(ReportRow::new(*point, StepLabel::Step(step), mean, baseline, ci));
        }
    }
    Ok(rows)
}

/// What the composed bound is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// The same composition plan applied to a worst-case trace (Δ = Δ_max at every step).
    #[default]
    OrderMatched,
    /// n copies of the data-independent per-step bound at order α.
    Classical,
}

/// Which run set a composed bound is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceDirection {
    /// Runs trained on X.
    #[default]
    Forward,
    /// Runs trained on X'.
    Reverse,
    /// The larger total of the two.
    Max,
}

impl std::str::FromStr for TraceDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "reverse" => Ok(Self::Reverse),
            "max" => Ok(Self::Max),
            other => Err(Error::domain(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComposeTraceOptions {
    pub alpha: u32,
    /// Hölder constant; `None` picks it with [`choose_p`].
    pub p: Option<f64>,
    pub direction: TraceDirection,
    pub variant: GpVariant,
    pub baseline: BaselineKind,
    pub j: f64,
}

impl Default for ComposeTraceOptions {
    fn default() -> Self {
        Self {
            alpha: 8,
            p: None,
            direction: TraceDirection::Forward,
            variant: GpVariant::Proof,
            baseline: BaselineKind::OrderMatched,
            j: REPORT_J,
        }
    }
}

/// Composed bound of one point from one run set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointComposition {
    pub point_id: String,
    pub direction: TraceDirection,
    pub plan: CompositionPlan,
    pub ours: CompositionResult,
    /// Per-step baseline terms, indexed like `ours.per_step_contributions`.
    pub baseline_per_step: Vec<f64>,
    pub baseline_total: f64,
}

impl PointComposition {
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows: Vec<ReportRow> = (0..self.plan.n)
            .map(|i| {
                ReportRow::new(
                    self.point_id.clone(),
                    StepLabel::Step(i + 1),
                    self.ours.per_step_contributions[i],
                    self.baseline_per_step[i],
                    Some(self.ours.estimator_ci[i]),
                )
            })
            .collect();
        rows.push(ReportRow::new(
            self.point_id.clone(),
            StepLabel::Total,
            self.ours.total_epsilon,
            self.baseline_total,
            Some(self.ours.estimator_ci.iter().sum()),
        ));
        rows
    }

    /// Per-step ratio of ours to baseline, `None` where the baseline is 0.
    pub fn ratios(&self) -> Vec<Option<f64>> {
        self.ours
            .per_step_contributions
            .iter()
            .zip(&self.baseline_per_step)
            .map(|(o, b)| (*b > 0.0).then(|| o / b))
            .collect()
    }
}

fn compose_point(
    point: &str,
    runs: &BTreeMap<&str, Vec<&TraceRecord>>,
    direction: TraceDirection,
    opts: &ComposeTraceOptions,
) -> Result<PointComposition> {
    let n = runs.values().next().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::MissingSamples(format!("point {point} has no steps")));
    }
    if let Some((run, recs)) = runs.iter().find(|(_, r)| r.len() != n) {
        return Err(Error::MissingSamples(format!(
            "point {point}: run {run} has {} steps, expected {n}",
            recs.len()
        )));
    }
    let p = opts.p.unwrap_or_else(|| choose_p(n, opts.alpha));
    let plan = CompositionPlan::with_variant(n, p, opts.alpha, opts.variant)?;
    let top = ceil_order(plan.max_order())?;
    let first_order = plan.integer_order_for_step(1);

    let mut cap: f64 = 0.0;
    let mut first: f64 = 0.0;
    let mut samples = Vec::with_capacity(runs.len());
    for (run, recs) in runs {
        let mut values = Vec::with_capacity(n - 1);
        for r in recs.iter() {
            cap = cap.max(sgm_rdp_bound(top, r.q, delta_max(r)?, r.sigma_effective)?);
            if r.step == 1 {
                first = first.max(sgm_rdp_bound(first_order, r.q, r.delta, r.sigma_effective)?);
            } else {
                let k = plan.integer_order_for_step(r.step);
                values.push(sgm_rdp_bound(k, r.q, r.delta, r.sigma_effective)?);
            }
        }
        samples.push(RunSamples {
            run_id: run.to_string(),
            values,
            checkpoints: Vec::new(),
        });
    }
    let matrix = StepSampleMatrix::for_plan(&plan, samples);
    let ours = compose_with(
        &plan,
        &matrix,
        first,
        &ComposeOptions {
            cap: Some(cap),
            j: opts.j,
        },
    )?;

    // Worst-case trace: the first run with every Δ replaced by Δ_max.
    let worst = runs.values().next().expect("at least one run");
    let (baseline_per_step, baseline_total) = match opts.baseline {
        BaselineKind::OrderMatched => {
            let values = worst[1..]
                .iter()
                .map(|r| {
                    sgm_rdp_bound(
                        plan.integer_order_for_step(r.step),
                        r.q,
                        delta_max(r)?,
                        r.sigma_effective,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let first_worst = sgm_rdp_bound(
                first_order,
                worst[0].q,
                delta_max(worst[0])?,
                worst[0].sigma_effective,
            )?;
            let m = StepSampleMatrix::for_plan(
                &plan,
                vec![RunSamples {
                    run_id: "worst-case".into(),
                    values,
                    checkpoints: Vec::new(),
                }],
            );
            let b = compose_with(&plan, &m, first_worst, &ComposeOptions { cap: None, j: opts.j })?;
            (b.per_step_contributions, b.total_epsilon)
        }
        BaselineKind::Classical => {
            let per = worst
                .iter()
                .map(|r| sgm_rdp_bound(opts.alpha, r.q, delta_max(r)?, r.sigma_effective))
                .collect::<Result<Vec<_>>>()?;
            let total = per.iter().sum();
            (per, total)
        }
    };
    Ok(PointComposition {
        point_id: point.to_string(),
        direction,
        plan,
        ours,
        baseline_per_step,
        baseline_total,
    })
}

/// Composed per-instance bounds for every tracked point.
///
/// `forward` holds traces of runs on X and `reverse` traces of runs on X';
/// with [`TraceDirection::Max`] each point reports the direction with the
/// larger total.
pub fn compose_traces(
    forward: &[TraceRecord],
    reverse: Option<&[TraceRecord]>,
    opts: &ComposeTraceOptions,
) -> Result<Vec<PointComposition>> {
    if opts.alpha < 2 {
        return Err(Error::domain(format!("order {} must be at least 2", opts.alpha)));
    }
    let need_reverse = opts.direction != TraceDirection::Forward;
    let reverse = match (need_reverse, reverse) {
        (true, None) => {
            return Err(Error::domain("this direction needs traces of runs on X'"));
        }
        (_, r) => r,
    };
    let fwd = group(forward)?;
    let rev = reverse.map(group).transpose()?;
    let mut out = Vec::new();
    match opts.direction {
        TraceDirection::Forward => {
            for (point, runs) in &fwd {
                out.push(compose_point(point, runs, TraceDirection::Forward, opts)?);
            }
        }
        TraceDirection::Reverse => {
            for (point, runs) in rev.as_ref().expect("checked above") {
                out.push(compose_point(point, runs, TraceDirection::Reverse, opts)?);
            }
        }
        TraceDirection::Max => {
            let rev = rev.as_ref().expect("checked above");
            for (point, runs) in &fwd {
                let a = compose_point(point, runs, TraceDirection::Forward, opts)?;
                let b = match rev.get(point) {
                    Some(r) => compose_point(point, r, TraceDirection::Reverse, opts)?,
                    None => {
                        return Err(Error::MissingSamples(format!(
                            "point {point} has no traces from runs on X'"
                        )))
                    }
                };
                out.push(if b.ours.total_epsilon > a.ours.total_epsilon {
                    b
                } else {
                    a
                });
            }
        }
    }
    Ok(out)
}

/// A mean-rule (or sum-rule) estimate at one checkpoint for one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBound {
    pub point_id: String,
    pub step: usize,
    pub estimate: GeneralBound,
    /// Data-independent bound with sensitivity C at the same order.
    pub baseline: f64,
}

impl CheckpointBound {
    pub fn row(&self) -> ReportRow {
        ReportRow::new(
            self.point_id.clone(),
            StepLabel::Step(self.step),
            self.estimate.bound.epsilon,
            self.baseline,
            Some(self.estimate.dominant().ci_halfwidth),
        )
    }
}

/// Nested Monte Carlo bound at parameters `theta` for removing `point_id`
/// from `dataset` (which plays X').
#[allow(clippy::too_many_arguments)]
pub fn general_bound_at_checkpoint(
    theta: &[f64],
    step: usize,
    dataset: &Dataset,
    point_id: &str,
    config: &TrainerConfig,
    alpha: u32,
    m_outer: usize,
    m_inner: usize,
    seed: u64,
) -> Result<CheckpointBound> {
    config.validate()?;
    if config.noise_multiplier <= 0.0 {
        return Err(Error::domain("the bound needs a positive noise multiplier"));
    }
    let x = dataset.without(point_id)?;
    let q = config.sampling_rate(dataset.len());
    let sx = MinibatchUpdates::at_checkpoint(theta, &x, config, q)?;
    let sxp = MinibatchUpdates::at_checkpoint(theta, dataset, config, q)?;
    let sigma = MinibatchUpdates::noise_std(config);
    let estimate = per_instance_bound_general(&sx, &sxp, alpha, sigma, m_outer, m_inner, seed)?;
    let baseline = sgm_rdp_bound(alpha, q, config.clip, sigma)?;
    Ok(CheckpointBound {
        point_id: point_id.to_string(),
        step,
        estimate,
        baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(run: &str, step: usize, point: &str, delta: f64) -> TraceRecord {
        TraceRecord {
            run_id: run.into(),
            step,
            point_id: point.into(),
            delta,
            delta_max: Some(1.0 / 128.0),
            sigma_effective: 1.0 / 128.0,
            q: 0.01,
            orders: None,
            correct: None,
            extra: BTreeMap::new(),
        }
    }

    fn trace(delta: impl Fn(usize, usize) -> f64, runs: usize, steps: usize) -> Vec<TraceRecord> {
        let mut v = Vec::new();
        for r in 0..runs {
            for t in 1..=steps {
                v.push(rec(&format!("r{r}"), t, "p", delta(r, t)));
            }
        }
        v
    }

    #[test]
    fn worst_case_trace_has_unit_ratios() {
        let recs = trace(|_, _| 1.0 / 128.0, 3, 5);
        for row in account_traces(&recs, 8).unwrap() {
            assert_eq!(row.ratio, Some(1.0));
        }
        let c = compose_traces(&recs, None, &ComposeTraceOptions::default()).unwrap();
        for r in c[0].ratios() {
            assert_eq!(r, Some(1.0));
        }
    }

    #[test]
    fn zero_trace_has_zero_ratios() {
        let recs = trace(|_, _| 0.0, 2, 4);
        for row in account_traces(&recs, 8).unwrap() {
            assert_eq!(row.ratio, Some(0.0));
        }
        let c = compose_traces(&recs, None, &ComposeTraceOptions::default()).unwrap();
        assert_eq!(c[0].ours.total_epsilon, 0.0);
    }

    #[test]
    fn single_step_is_the_per_step_bound() {
        let recs = trace(|_, _| 0.5 / 128.0, 1, 1);
        let c = compose_traces(&recs, None, &ComposeTraceOptions::default()).unwrap();
        let direct = sgm_rdp_bound(8, 0.01, 0.5 / 128.0, 1.0 / 128.0).unwrap();
        assert_eq!(c[0].ours.total_epsilon, direct);
    }

    #[test]
    fn classical_baseline_total() {
        let recs = trace(|_, _| 0.5 / 128.0, 2, 6);
        let opts = ComposeTraceOptions {
            baseline: BaselineKind::Classical,
            ..ComposeTraceOptions::default()
        };
        let c = compose_traces(&recs, None, &opts).unwrap();
        let per = sgm_rdp_bound(8, 0.01, 1.0 / 128.0, 1.0 / 128.0).unwrap();
        assert!((c[0].baseline_total - 6.0 * per).abs() < 1e-15);
    }

    #[test]
    fn gaps_and_missing_fields_rejected() {
        let mut recs = trace(|_, _| 0.0, 1, 4);
        recs.remove(2);
        assert!(account_traces(&recs, 8).is_err());
        let mut recs = trace(|_, _| 0.0, 1, 2);
        recs[0].delta_max = None;
        assert!(account_traces(&recs, 8).is_err());
        let recs = trace(|_, _| 0.0, 1, 2);
        let opts = ComposeTraceOptions {
            direction: TraceDirection::Max,
            ..ComposeTraceOptions::default()
        };
        assert!(compose_traces(&recs, None, &opts).is_err());
    }

    #[test]
    fn max_direction_picks_larger_total() {
        let small = trace(|_, _| 0.1 / 128.0, 2, 5);
        let large = trace(|_, _| 0.6 / 128.0, 2, 5);
        let opts = ComposeTraceOptions {
            direction: TraceDirection::Max,
            ..ComposeTraceOptions::default()
        };
        let c = compose_traces(&small, Some(&large), &opts).unwrap();
        assert_eq!(c[0].direction, TraceDirection::Reverse);
        let c = compose_traces(&large, Some(&small), &opts).unwrap();
        assert_eq!(c[0].direction, TraceDirection::Forward);
    }

    #[test]
    fn smaller_sensitivity_gives_smaller_total() {
        let a = trace(|r, t| (0.2 + 0.01 * (r + t) as f64) / 128.0, 3, 8);
        let b = trace(|r, t| (0.4 + 0.01 * (r + t) as f64) / 128.0, 3, 8);
        let opts = ComposeTraceOptions::default();
        let ca = compose_traces(&a, None, &opts).unwrap();
        let cb = compose_traces(&b, None, &opts).unwrap();
        assert!(ca[0].ours.total_epsilon < cb[0].ours.total_epsilon);
        assert!(cb[0].ours.total_epsilon < cb[0].baseline_total);
    }
}
