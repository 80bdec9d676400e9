use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Point};
use super::model::{norm, ModelKind};
use crate::error::{Error, Result};
use crate::general_update::{UpdateSampler, UpdateVector};

/// How clipped per-example gradients are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Divide the clipped sum by the expected batch size L.
    #[default]
    Sum,
    /// Divide the clipped sum by the realized batch size.
    Mean,
}

/// DP-SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub expected_batch: usize,
    pub clip: f64,
    /// Noise standard deviation in units of the clip norm.
    pub noise_multiplier: f64,
    pub steps: usize,
    pub update_rule: UpdateRule,
    /// Seed of the shared initialization.
    pub seed: u64,
    pub model: ModelKind,
    /// Checkpoint every this many steps (the initial and final states are always kept).
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            expected_batch: 128,
            clip: 1.0,
            noise_multiplier: 1.0,
            steps: 100,
            update_rule: UpdateRule::Sum,
            seed: 0,
            model: ModelKind::Logistic,
            checkpoint_every: 10,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::domain("learning rate must be finite and nonnegative"));
        }
        if self.expected_batch == 0 {
            return Err(Error::domain("expected batch size must be positive"));
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(Error::domain("clip norm must be positive"));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::domain("noise multiplier must be finite and nonnegative"));
        }
        if self.steps == 0 {
            return Err(Error::domain("at least one step is required"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::domain("checkpoint cadence must be positive"));
        }
        self.model.validate()
    }

    /// Poisson inclusion probability `min(1, L/|X|)`.
    pub fn sampling_rate(&self, dataset_len: usize) -> f64 {
        if dataset_len == 0 {
            return 0.0;
        }
        (self.expected_batch as f64 / dataset_len as f64).min(1.0)
    }

    /// Noise std paired with normalized sensitivities: `σ·C/L`.
    pub fn sigma_effective(&self) -> f64 {
        self.noise_multiplier * self.clip / self.expected_batch as f64
    }

    /// Normalized maximum sensitivity `C/L`.
    pub fn delta_max(&self) -> f64 {
        self.clip / self.expected_batch as f64
    }

    /// The shared initial parameters.
    pub fn initial_theta(&self, dim: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.model.init(dim, &mut rng)
    }
}

/// Model state conditioning the following step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run_id: String,
    /// Number of steps already applied.
    pub step: usize,
    pub parameters: Vec<f64>,
    /// Per-run seed and word position of its stream when the checkpoint was taken.
    pub run_seed: u64,
    #[serde(with = "cursor_text")]
    pub rng_cursor: u128,
}

/// The stream cursor exceeds 64 bits, so it is stored as decimal text.
mod cursor_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What one step observed about the tracked points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step index; the record describes `θ_{t−1}`.
    pub step: usize,
    pub batch_size: usize,
    /// `min(‖∇ℓ(θ_{t−1}, x)‖, C)` for every tracked point.
    pub clipped_norms: Vec<f64>,
    /// Whether `θ_{t−1}` classifies each tracked point correctly.
    pub correct: Vec<bool>,
}

/// Everything recorded by one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub run_id: String,
    pub run_seed: u64,
    pub q: f64,
    pub tracked_ids: Vec<String>,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_parameters: Vec<f64>,
}

/// Independent inclusion of each of `n` indices with probability `q`.
pub fn poisson_minibatch<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    if q <= 0.0 || n == 0 {
        return Vec::new();
    }
    if q >= 1.0 {
        return (0..n).collect();
    }
    // Gaps between included indices are geometric.
    let geo = Geometric::new(q).expect("q in (0, 1)");
    let mut out = Vec::with_capacity((n as f64 * q * 1.5) as usize + 4);
    let mut i = geo.sample(rng);
    while i < n as u64 {
        out.push(i as usize);
        i += 1 + geo.sample(rng);
    }
    out
}

/// Rescales `g` onto the ball of radius `clip`.
pub fn clip_grad(g: &[f64], clip: f64) -> Vec<f64> {
    let n = norm(g);
    if n <= clip {
        return g.to_vec();
    }
    let s = clip / n;
    g.iter().map(|x| x * s).collect()
}

fn accumulate(grads: &[Vec<f64>], clip: f64, dim: usize) -> Vec<f64> {
    let mut s = vec![0.0; dim];
    for g in grads {
        for (a, b) in s.iter_mut().zip(clip_grad(g, clip)) {
            *a += b;
        }
    }
    s
}

/// `(1/L)·Σ clip(gᵢ)`; zero for an empty batch.
pub fn sum_update(grads: &[Vec<f64>], clip: f64, normalizer: f64, dim: usize) -> UpdateVector {
    let mut s = accumulate(grads, clip, dim);
    s.iter_mut().for_each(|x| *x /= normalizer);
    UpdateVector(s)
}

/// `(1/|B|)·Σ clip(gᵢ)`; zero for an empty batch.
pub fn mean_update(grads: &[Vec<f64>], clip: f64, dim: usize) -> UpdateVector {
    let mut s = accumulate(grads, clip, dim);
    if !grads.is_empty() {
        let k = grads.len() as f64;
        s.iter_mut().for_each(|x| *x /= k);
    }
    UpdateVector(s)
}

/// Normalized sum-rule sensitivity `min(‖∇ℓ(θ, x)‖, C)/L` of one point.
pub fn per_point_sensitivity(
    theta: &[f64],
    point: &Point,
    model: ModelKind,
    clip: f64,
    normalizer: f64,
    rule: UpdateRule,
) -> Result<f64> {
    if rule == UpdateRule::Mean {
        return Err(Error::domain(
            "mean-rule sensitivity is a distribution; use the general update bound",
        ));
    }
    model.check_dims(theta, &point.features)?;
    let g = model.grad(theta, &point.features, point.label);
    Ok(norm(&g).min(clip) / normalizer)
}

/// One DP-SGD step from `theta`, returning the new parameters and what was observed at `theta`.
pub fn dpsgd_step<R: Rng + ?Sized>(
    theta: &[f64],
    dataset: &Dataset,
    config: &TrainerConfig,
    tracked: &[Point],
    step: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, StepRecord)> {
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("parameters before step {step}")));
    }
    let model = config.model;
    let dim = theta.len();
    let mut clipped_norms = Vec::with_capacity(tracked.len());
    let mut correct = Vec::with_capacity(tracked.len());
    for p in tracked {
        model.check_dims(theta, &p.features)?;
        let g = model.grad(theta, &p.features, p.label);
        clipped_norms.push(norm(&g).min(config.clip));
        correct.push(model.is_correct(theta, &p.features, p.label));
    }
    let q = config.sampling_rate(dataset.len());
    let batch = poisson_minibatch(dataset.len(), q, rng);
    let grads: Vec<Vec<f64>> = batch
        .iter()
        .map(|&i| {
            let p = &dataset.points[i];
            model.grad(theta, &p.features, p.label)
        })
        .collect();
    let l = config.expected_batch as f64;
    let noise_std = config.noise_multiplier * config.clip;
    let mut next = theta.to_vec();
    match config.update_rule {
        UpdateRule::Sum => {
            let s = accumulate(&grads, config.clip, dim);
            for (t, si) in next.iter_mut().zip(s) {
                let z: f64 = rng.sample(StandardNormal);
                *t -= config.learning_rate / l * (si + noise_std * z);
            }
        }
        UpdateRule::Mean => {
            let u = mean_update(&grads, config.clip, dim);
            for (t, ui) in next.iter_mut().zip(u.0) {
                let z: f64 = rng.sample(StandardNormal);
                *t -= config.learning_rate * (ui + noise_std * z);
            }
        }
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "parameters after step {step} (batch of {}, max |θ| before step {})",
            batch.len(),
            theta.iter().fold(0.0f64, |m, x| m.max(x.abs()))
        )));
    }
    Ok((
        next,
        StepRecord {
            step,
            batch_size: batch.len(),
            clipped_norms,
            correct,
        },
    ))
}

fn run_from(
    dataset: &Dataset,
    config: &TrainerConfig,
    tracked: &[Point],
    run_id: &str,
    run_seed: u64,
    start: &Checkpoint,
    mut rng: ChaCha8Rng,
) -> Result<RunTrace> {
    let mut theta = start.parameters.clone();
    let mut records = Vec::with_capacity(config.steps - start.step);
    let mut checkpoints = vec![start.clone()];
    for t in start.step + 1..=config.steps {
        let (next, rec) = dpsgd_step(&theta, dataset, config, tracked, t, &mut rng).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("run {run_id}: {m}")),
            other => other,
        })?;
        theta = next;
        records.push(rec);
        if t % config.checkpoint_every == 0 || t == config.steps {
            checkpoints.push(Checkpoint {
                run_id: run_id.to_string(),
                step: t,
                parameters: theta.clone(),
                run_seed,
                rng_cursor: rng.get_word_pos(),
            });
        }
    }
    Ok(RunTrace {
        run_id: run_id.to_string(),
        run_seed,
        q: config.sampling_rate(dataset.len()),
        tracked_ids: tracked.iter().map(|p| p.id.clone()).collect(),
        records,
        checkpoints,
        final_parameters: theta,
    })
}

/// One run from the shared initialization with its own batch and noise stream.
pub fn train_run(
    dataset: &Dataset,
    config: &TrainerConfig,
    tracked: &[Point],
    run_id: &str,
    run_seed: u64,
) -> Result<RunTrace> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidData("cannot train on an empty dataset".into()));
    }
    let init = config.initial_theta(dataset.dim());
    let start = Checkpoint {
        run_id: run_id.to_string(),
        step: 0,
        parameters: init,
        run_seed,
        rng_cursor: 0,
    };
    run_from(
        dataset,
        config,
        tracked,
        run_id,
        run_seed,
        &start,
        ChaCha8Rng::seed_from_u64(run_seed),
    )
}

/// Continues a run from one of its checkpoints; reproduces the original continuation exactly.
pub fn resume_run(
    dataset: &Dataset,
    config: &TrainerConfig,
    tracked: &[Point],
    checkpoint: &Checkpoint,
) -> Result<RunTrace> {
    config.validate()?;
    if checkpoint.step > config.steps {
        return Err(Error::InvalidData(format!(
            "checkpoint at step {} is past the configured {} steps",
            checkpoint.step, config.steps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(checkpoint.run_seed);
    rng.set_word_pos(checkpoint.rng_cursor);
    run_from(
        dataset,
        config,
        tracked,
        &checkpoint.run_id,
        checkpoint.run_seed,
        checkpoint,
        rng,
    )
}

/// `runs` independent runs with seeds `seed_base + r`, all from the same initialization.
///
/// Runs execute in parallel; a failing run does not affect the others.
pub fn multi_run(
    dataset: &Dataset,
    config: &TrainerConfig,
    tracked: &[Point],
    runs: usize,
    seed_base: u64,
    run_prefix: &str,
) -> Vec<Result<RunTrace>> {
    (0..runs)
        .into_par_iter()
        .map(|r| {
            train_run(
                dataset,
                config,
                tracked,
                &format!("{run_prefix}{r}"),
                seed_base.wrapping_add(r as u64),
            )
        })
        .collect()
}

/// Minibatch updates `U(X_B)` at a fixed checkpoint, in raw update space.
///
/// Per-example clipped gradients are computed once; each draw Poisson-samples
/// rows and aggregates them with the configured rule.
#[derive(Debug, Clone)]
pub struct MinibatchUpdates {
    clipped: Vec<Vec<f64>>,
    q: f64,
    rule: UpdateRule,
    normalizer: f64,
    dim: usize,
}

impl MinibatchUpdates {
    pub fn at_checkpoint(theta: &[f64], dataset: &Dataset, config: &TrainerConfig, q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::domain(format!("sampling rate {q} outside [0, 1]")));
        }
        let model = config.model;
        let mut clipped = Vec::with_capacity(dataset.len());
        for p in &dataset.points {
            model.check_dims(theta, &p.features)?;
            clipped.push(clip_grad(&model.grad(theta, &p.features, p.label), config.clip));
        }
        Ok(Self {
            clipped,
            q,
            rule: config.update_rule,
            normalizer: config.expected_batch as f64,
            dim: theta.len(),
        })
    }

    /// Noise std the mechanism adds to these updates.
    pub fn noise_std(config: &TrainerConfig) -> f64 {
        config.noise_multiplier * config.clip
    }
}

impl UpdateSampler for MinibatchUpdates {
    fn dim(&self) -> usize {
        self.dim
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> UpdateVector {
        let batch = poisson_minibatch(self.clipped.len(), self.q, rng);
        let mut s = vec![0.0; self.dim];
        for &i in &batch {
            for (a, b) in s.iter_mut().zip(&self.clipped[i]) {
                *a += b;
            }
        }
        let div = match self.rule {
            // Raw-space sum: the 1/L factor is post-processing.
            UpdateRule::Sum => 1.0,
            UpdateRule::Mean => batch.len().max(1) as f64,
        };
        let _ = self.normalizer;
        s.iter_mut().for_each(|x| *x /= div);
        UpdateVector(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::dataset::{synth_dataset, SynthSpec, TargetKind};

    fn small_dataset() -> Dataset {
        synth_dataset(
            &SynthSpec {
                points_per_cluster: 30,
                target: TargetKind::Duplicate,
                ..SynthSpec::default()
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn minibatch_edge_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(poisson_minibatch(50, 0.0, &mut rng).is_empty());
        assert_eq!(poisson_minibatch(50, 1.0, &mut rng), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn minibatch_size_statistics() {
        let n = 60_000;
        let q = 128.0 / 60_000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let total: usize = (0..draws).map(|_| poisson_minibatch(n, q, &mut rng).len()).sum();
        let mean = total as f64 / draws as f64;
        let sd = (n as f64 * q * (1.0 - q) / draws as f64).sqrt();
        assert!((mean - 128.0).abs() < 3.0 * sd, "mean {mean}");
    }

    #[test]
    fn minibatch_inclusion_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = vec![0usize; 20];
        let draws = 20_000;
        for _ in 0..draws {
            for i in poisson_minibatch(20, 0.3, &mut rng) {
                counts[i] += 1;
            }
        }
        let sd = (draws as f64 * 0.3 * 0.7).sqrt();
        for c in counts {
            assert!((c as f64 - 0.3 * draws as f64).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn clipping_examples() {
        assert_eq!(clip_grad(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let c = clip_grad(&[1.2, 1.6], 1.0);
        assert!((norm(&c) - 1.0).abs() < 1e-15);
        assert!((c[0] / c[1] - 0.75).abs() < 1e-15);
        assert_eq!(clip_grad(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn update_rules() {
        let g = vec![vec![3.0, 4.0]];
        let u = sum_update(&g, 5.0, 128.0, 2);
        assert!((u.norm_sq().sqrt() - 5.0 / 128.0).abs() < 1e-15);
        let two = vec![vec![6.0, 8.0], vec![6.0, 8.0]];
        let m = mean_update(&two, 5.0, 2);
        assert!((m.0[0] - 3.0).abs() < 1e-15 && (m.0[1] - 4.0).abs() < 1e-15);
        assert_eq!(sum_update(&[], 1.0, 10.0, 3).0, vec![0.0; 3]);
        assert_eq!(mean_update(&[], 1.0, 3).0, vec![0.0; 3]);
    }

    #[test]
    fn sensitivity_examples() {
        let model = ModelKind::Logistic;
        // θ = 0 gives residual 1/2 for label 1, so ‖g‖ = ‖(x, 1)‖/2 = 3.
        let p = Point {
            id: "a".into(),
            features: vec![(35.0f64).sqrt()],
            label: 1,
        };
        let d = per_point_sensitivity(&[0.0, 0.0], &p, model, 1.0, 128.0, UpdateRule::Sum).unwrap();
        assert_eq!(d, 0.0078125);
        let far = Point {
            id: "b".into(),
            features: vec![0.0],
            label: 1,
        };
        let d = per_point_sensitivity(&[0.0, 1e3], &far, model, 1.0, 128.0, UpdateRule::Sum).unwrap();
        assert!(d < 1e-300);
        assert!(per_point_sensitivity(&[0.0], &p, model, 1.0, 128.0, UpdateRule::Sum).is_err());
        assert!(per_point_sensitivity(&[0.0, 0.0], &p, model, 1.0, 128.0, UpdateRule::Mean).is_err());
    }

    #[test]
    fn noiseless_full_batch_step_is_clipped_gradient_descent() {
        let data = small_dataset();
        let config = TrainerConfig {
            learning_rate: 0.3,
            expected_batch: data.len(),
            clip: 1e6,
            noise_multiplier: 0.0,
            steps: 1,
            ..TrainerConfig::default()
        };
        let theta = vec![0.2, -0.1, 0.05];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (next, rec) = dpsgd_step(&theta, &data, &config, &[], 1, &mut rng).unwrap();
        assert_eq!(rec.batch_size, data.len());
        // Finite-difference gradient of the mean loss.
        let h = 1e-6;
        let loss = |t: &[f64]| -> f64 {
            data.points
                .iter()
                .map(|p| config.model.loss(t, &p.features, p.label))
                .sum::<f64>()
                / data.len() as f64
        };
        let mut expected = theta.clone();
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            expected[i] -= config.learning_rate * (loss(&tp) - loss(&tm)) / (2.0 * h);
        }
        let step_norm = norm(
            &theta
                .iter()
                .zip(&expected)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        let err = norm(&next.iter().zip(&expected).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(err / step_norm < 1e-5, "relative error {}", err / step_norm);
    }

    #[test]
    fn zero_learning_rate_keeps_theta() {
        let data = small_dataset();
        let config = TrainerConfig {
            learning_rate: 0.0,
            expected_batch: 8,
            ..TrainerConfig::default()
        };
        let theta = vec![0.2, -0.1, 0.05];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (next, _) = dpsgd_step(&theta, &data, &config, &[], 1, &mut rng).unwrap();
        assert_eq!(next, theta);
    }

    #[test]
    fn runs_are_reproducible_and_clipped() {
        let data = small_dataset();
        let config = TrainerConfig {
            expected_batch: 8,
            steps: 25,
            checkpoint_every: 5,
            ..TrainerConfig::default()
        };
        let tracked = vec![data.target().unwrap().clone(), data.points[5].clone()];
        let a = train_run(&data, &config, &tracked, "r0", 17).unwrap();
        let b = train_run(&data, &config, &tracked, "r0", 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 25);
        assert_eq!(a.checkpoints.len(), 6);
        assert!(a.records.iter().enumerate().all(|(i, r)| r.step == i + 1));
        for r in &a.records {
            assert!(r.clipped_norms.iter().all(|&d| d <= config.clip));
        }
        let many = multi_run(&data, &config, &tracked, 3, 17, "r");
        assert_eq!(many[0].as_ref().unwrap(), &a);
        assert_ne!(many[1].as_ref().unwrap().records, a.records);
        assert_eq!(
            many[1].as_ref().unwrap().checkpoints[0].parameters,
            a.checkpoints[0].parameters
        );
    }

    #[test]
    fn resume_reproduces_continuation() {
        let data = small_dataset();
        let config = TrainerConfig {
            expected_batch: 8,
            steps: 20,
            checkpoint_every: 5,
            ..TrainerConfig::default()
        };
        let full = train_run(&data, &config, &[], "r0", 3).unwrap();
        let resumed = resume_run(&data, &config, &[], &full.checkpoints[2]).unwrap();
        assert_eq!(resumed.final_parameters, full.final_parameters);
        assert_eq!(resumed.records, full.records[10..]);
    }

    #[test]
    fn divergence_is_reported() {
        let data = small_dataset();
        let config = TrainerConfig {
            learning_rate: 1e308,
            expected_batch: 8,
            steps: 5,
            update_rule: UpdateRule::Mean,
            ..TrainerConfig::default()
        };
        let r = train_run(&data, &config, &[], "r0", 3);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
