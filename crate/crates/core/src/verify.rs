//! Property suite run by `gradcal verify`.
//!
//! Every check builds a small instance, measures one number and compares it
//! with a bound. Reports carry both so a failure shows how far off it was.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::buffer::ReservoirBuffer;
use crate::calib::{
    er_estimate, replay_calibrator, run_cil, CalibratorEvent, CalibratorState, CombinedForm,
    Method, StageContext, StageEndMode, TaskWeighting, TaskWeights, TrainConfig, TransitionFn,
};
use crate::error::{Error, Result};
use crate::metrics::{aa, faa, faia, ff, AccuracyMatrix};
use crate::model::{ModelSpec, Sample};
use crate::params::ParameterVector;
use crate::stream::{draw_with_replacement, generate_gaussian_cil, StreamConfig, TaskStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Quick,
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quick" => Ok(Profile::Quick),
            "full" => Ok(Profile::Full),
            other => Err(Error::config(format!(
                "unknown profile `{other}` (valid: quick, full)"
            ))),
        }
    }
}

impl Profile {
    fn lemma_seeds(self) -> usize {
        match self {
            Profile::Quick => 2_000,
            Profile::Full => 10_000,
        }
    }

    fn contraction_seeds(self) -> usize {
        match self {
            Profile::Quick => 20,
            Profile::Full => 50,
        }
    }

    fn reservoir_seeds(self) -> u64 {
        match self {
            Profile::Quick => 20_000,
            Profile::Full => 100_000,
        }
    }
}

/// Outcome of one property: `measured` must not exceed `bound`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub name: &'static str,
    pub measured: f64,
    pub bound: f64,
    pub passed: bool,
    pub detail: String,
}

impl PropertyReport {
    fn at_most(name: &'static str, measured: f64, bound: f64, detail: impl Into<String>) -> Self {
        PropertyReport {
            name,
            measured,
            bound,
            passed: measured <= bound,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} measured {:.3e} bound {:.3e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.bound,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub profile: Profile,
    pub properties: Vec<PropertyReport>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }
}

/// Runs every property with the library's own task-transition rule.
pub fn run_verification(profile: Profile) -> Result<VerifyReport> {
    run_verification_with(profile, CalibratorState::task_transition)
}

/// Runs every property, using `transition` wherever the `Γ′` recursion is
/// replayed.
pub fn run_verification_with(profile: Profile, transition: TransitionFn) -> Result<VerifyReport> {
    let properties = vec![
        check_gradients(100, 11)?,
        check_lemma_exhaustive(transition)?,
        check_lemma_stochastic(profile.lemma_seeds(), transition)?,
        check_unbiasedness()?,
        check_contraction(profile.contraction_seeds())?,
        check_snapshot_determinism(100)?,
        check_reductions()?,
        check_reservoir_law(profile.reservoir_seeds())?,
        check_step_accounting()?,
        check_metric_arithmetic()?,
    ];
    Ok(VerifyReport {
        profile,
        properties,
    })
}

fn random_vector<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_theta<R: Rng + ?Sized>(model: &ModelSpec, scale: f64, rng: &mut R) -> ParameterVector {
    ParameterVector::new(random_vector(model.param_dim(), scale, rng))
        .expect("gaussian draws are finite")
}

fn small_stream(
    dim: usize,
    tasks: usize,
    samples_per_class: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<TaskStream> {
    generate_gaussian_cil(&StreamConfig {
        dim,
        tasks,
        classes_per_task: 2,
        class_count: 0,
        samples_per_class,
        cluster_separation: 1.0,
        noise_sigma: 1.0,
        test_fraction,
        seed,
        ..StreamConfig::default()
    })
}

/// Analytic against central-difference gradients, `triples` random
/// `(x, y, θ)` per model kind. Measured: worst `‖g − ĝ‖∞ / max(1, ‖ĝ‖∞)`.
pub fn check_gradients(triples: usize, seed: u64) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models = [
        ModelSpec::ridge(5, 0.1),
        ModelSpec::softmax(4, 3, 0.05),
        ModelSpec::mlp(3, 4, 3, 0.05),
    ];
    let mut worst = 0.0f64;
    for model in &models {
        for _ in 0..triples {
            let x = random_vector(model.input_dim, 1.0, &mut rng);
            let label = if model.kind.is_classifier() {
                rng.random_range(1..=model.class_count as u32)
            } else {
                rng.random_range(0..5)
            };
            let batch = [Sample::new(x, label)];
            let theta = random_theta(model, 0.5, &mut rng);
            let g = model.gradient(&batch, &theta)?;
            let fd = model.finite_diff_gradient(&batch, &theta, 1e-5)?;
            let scale = fd.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(g.max_abs_diff(&fd) / scale);
        }
    }
    Ok(PropertyReport::at_most(
        "gradient_finite_difference",
        worst,
        1e-5,
        format!("{triples} triples x 3 model kinds"),
    ))
}

/// Largest deviation of `Γ′` from the full historical gradient at the
/// current snapshot, over the events of a replay. The first task's stage
/// ends are skipped since no history exists there.
fn gamma_deviation(
    model: &ModelSpec,
    stream: &TaskStream,
    event: CalibratorEvent,
    state: &CalibratorState,
) -> Result<Option<ParameterVector>> {
    let history_end = match event {
        CalibratorEvent::StageEnd { task, .. } => task - 1,
        CalibratorEvent::Transition { task } => task,
    };
    if history_end == 0 {
        return Ok(None);
    }
    let oracle = model.full_gradient(&stream.train_prefix(history_end), state.theta_snapshot())?;
    Ok(Some(oracle))
}

/// Exhaustive stage ends with a lossless buffer: `Γ′` equals the full
/// historical gradient at the snapshot after every stage end and transition.
pub fn check_lemma_exhaustive(transition: TransitionFn) -> Result<PropertyReport> {
    let stream = small_stream(3, 3, 6, 1.0 / 6.0, 21)?;
    let model = ModelSpec::softmax(3, stream.class_count(), 0.01);
    let total = stream.train_prefix(stream.len()).len();
    let config = TrainConfig {
        method: Method::Dgc,
        steps_per_stage: 5,
        stages_per_task: 2,
        batch_size: 2,
        learning_rate: 0.1,
        buffer_capacity: total,
        stage_end: StageEndMode::Exhaustive,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = run_cil(&stream, &model, &config)?;
    let mut worst = 0.0f64;
    let mut events = 0usize;
    replay_calibrator(
        &model,
        &stream,
        &run.stage_snapshots,
        total,
        StageEndMode::Exhaustive,
        config.batch_size,
        config.seed,
        TaskWeighting::UniformTask,
        transition,
        |event, state| {
            if let Some(oracle) = gamma_deviation(&model, &stream, event, state)? {
                worst = worst.max(state.gamma_prime().max_abs_diff(&oracle));
                events += 1;
            }
            Ok(())
        },
    )?;
    Ok(PropertyReport::at_most(
        "lemma_exhaustive",
        worst,
        1e-10,
        format!("{events} events, {total} samples"),
    ))
}

/// Frozen trajectory, capacity-limited reservoir and single-sample stage-end
/// draws: the mean of `Γ′` over `n_seeds` buffer seeds matches the full
/// historical gradient. Measured: worst `|mean − oracle| / SE` per coordinate.
pub fn check_lemma_stochastic(n_seeds: usize, transition: TransitionFn) -> Result<PropertyReport> {
    if n_seeds < 2 {
        return Err(Error::config("stochastic check needs at least two seeds"));
    }
    let stream = small_stream(4, 3, 15, 1.0 / 3.0, 31)?;
    let model = ModelSpec::ridge(4, 0.05);
    let capacity = 10;
    let config = TrainConfig {
        method: Method::Dgc,
        steps_per_stage: 20,
        stages_per_task: 1,
        batch_size: 4,
        learning_rate: 0.05,
        buffer_capacity: capacity,
        seed: 8,
        ..TrainConfig::default()
    };
    let run = run_cil(&stream, &model, &config)?;

    // per event: running mean, M2 and the oracle (identical across seeds)
    let mut stats: Vec<(Vec<f64>, Vec<f64>, ParameterVector)> = Vec::new();
    for (n, seed) in (0..n_seeds as u64).enumerate() {
        let mut idx = 0usize;
        replay_calibrator(
            &model,
            &stream,
            &run.stage_snapshots,
            capacity,
            StageEndMode::Sampled,
            1,
            1_000 + seed,
            TaskWeighting::UniformTask,
            transition,
            |event, state| {
                let Some(oracle) = gamma_deviation(&model, &stream, event, state)? else {
                    return Ok(());
                };
                if n == 0 {
                    let p = oracle.dim();
                    stats.push((vec![0.0; p], vec![0.0; p], oracle));
                }
                let (mean, m2, _) = &mut stats[idx];
                let count = (n + 1) as f64;
                for (i, g) in state.gamma_prime().iter().enumerate() {
                    let delta = g - mean[i];
                    mean[i] += delta / count;
                    m2[i] += delta * (g - mean[i]);
                }
                idx += 1;
                Ok(())
            },
        )?;
    }
    let mut worst = 0.0f64;
    for (mean, m2, oracle) in &stats {
        for i in 0..mean.len() {
            let se = (m2[i] / (n_seeds - 1) as f64 / n_seeds as f64).sqrt();
            let diff = (mean[i] - oracle[i]).abs();
            let z = if se > 0.0 {
                diff / se
            } else if diff <= 1e-10 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
    }
    Ok(PropertyReport::at_most(
        "lemma_stochastic",
        worst,
        3.0,
        format!(
            "{n_seeds} seeds, {} events, capacity {capacity}",
            stats.len()
        ),
    ))
}

/// Brute-force mean of each method's step direction over all
/// (current, replay) sample pairs equals the joint full gradient, given a
/// lossless buffer and a calibrator holding the exact historical gradient.
pub fn check_unbiasedness() -> Result<PropertyReport> {
    let stream = small_stream(2, 3, 4, 0.25, 41)?;
    let model = ModelSpec::softmax(2, stream.class_count(), 0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let snapshot = random_theta(&model, 0.3, &mut rng);
    let theta = random_theta(&model, 0.3, &mut rng);
    let tasks = stream.tasks();
    let t = tasks.len();
    let mut state = CalibratorState::new(snapshot.clone());
    for task in &tasks[..t - 1] {
        let g = model.full_gradient(&task.train, &snapshot)?;
        state.fold_task_gradient(&g, task.train.len(), TaskWeighting::UniformTask);
    }
    let history = stream.train_prefix(t - 1);
    let all = stream.train_prefix(t);
    let current = &tasks[t - 1].train;
    let oracle = model.full_gradient(&all, &theta)?;
    let weights = TaskWeights::uniform(t);

    let mut worst = 0.0f64;
    for method in Method::ALL {
        let ctx = StageContext::prepare(
            method,
            &model,
            &state,
            weights,
            current,
            &history,
            &all,
            0.3,
            CombinedForm::CurrentTask,
        )?;
        let mut sum = ParameterVector::zeros(model.param_dim());
        let mut count = 0usize;
        if method == Method::SvrgJoint {
            for s in &all {
                sum.axpy(
                    1.0,
                    &ctx.estimate(std::slice::from_ref(s), None, &theta)?.vector,
                );
                count += 1;
            }
        } else {
            for c in current {
                for b in &history {
                    let v = ctx.estimate(
                        std::slice::from_ref(c),
                        Some(std::slice::from_ref(b)),
                        &theta,
                    )?;
                    sum.axpy(1.0, &v.vector);
                    count += 1;
                }
            }
        }
        worst = worst.max(sum.scale(1.0 / count as f64).max_abs_diff(&oracle));
    }
    Ok(PropertyReport::at_most(
        "unbiasedness",
        worst,
        1e-10,
        format!("{} samples, all methods", all.len()),
    ))
}

/// Closed-form minimiser of the ridge objective on `data`.
fn ridge_minimiser(data: &[Sample], dim: usize, l2: f64) -> Result<ParameterVector> {
    let n = data.len() as f64;
    let mut a = DMatrix::<f64>::identity(dim, dim) * l2;
    let mut b = DVector::<f64>::zeros(dim);
    for s in data {
        for i in 0..dim {
            b[i] += s.features[i] * s.label as f64 / n;
            for j in 0..dim {
                a[(i, j)] += s.features[i] * s.features[j] / n;
            }
        }
    }
    let sol = a
        .cholesky()
        .ok_or_else(|| Error::domain("ridge normal matrix is not positive definite"))?
        .solve(&b);
    ParameterVector::new(sol.iter().copied().collect())
}

/// Per-stage contraction of `E‖θ̃ − θ*‖²` for DGC on a ridge stream with
/// `m = ⌈10L²/γ²⌉` and `η = γ/(10L)`. Measured: worst ratio over every stage
/// of every task.
pub fn check_contraction(n_seeds: usize) -> Result<PropertyReport> {
    let stream = small_stream(4, 3, 24, 1.0 / 6.0, 51)?;
    let l2 = 0.1;
    let model = ModelSpec::ridge(4, l2);
    let tasks = stream.len();
    let mut smooth = 0.0f64;
    let mut convex = f64::INFINITY;
    let mut optima = Vec::with_capacity(tasks);
    for t in 1..=tasks {
        let prefix = stream.train_prefix(t);
        let c = model.convexity_params(&prefix)?;
        smooth = smooth.max(c.smoothness);
        convex = convex.min(c.strong_convexity);
        optima.push(ridge_minimiser(&prefix, 4, l2)?);
    }
    let steps = (10.0 * smooth * smooth / (convex * convex)).ceil() as usize;
    let stages = 3;
    let base = TrainConfig {
        method: Method::Dgc,
        steps_per_stage: steps,
        stages_per_task: stages,
        batch_size: 4,
        learning_rate: convex / (10.0 * smooth),
        buffer_capacity: stream.train_prefix(tasks).len(),
        stage_end: StageEndMode::Exhaustive,
        ..TrainConfig::default()
    };
    // dist[t][s] summed over seeds
    let mut dist = vec![vec![0.0f64; stages + 1]; tasks];
    for seed in 0..n_seeds as u64 {
        let run = run_cil(
            &stream,
            &model,
            &TrainConfig {
                seed,
                ..base.clone()
            },
        )?;
        for (t, snaps) in run.stage_snapshots.iter().enumerate() {
            for (s, snap) in snaps.iter().enumerate() {
                dist[t][s] += snap.distance_sq(&optima[t]);
            }
        }
    }
    let mut worst = 0.0f64;
    for row in &dist {
        for w in row.windows(2) {
            worst = worst.max(w[1] / w[0]);
        }
    }
    Ok(PropertyReport::at_most(
        "linear_contraction",
        worst,
        0.6,
        format!(
            "L {smooth:.3}, gamma {convex:.3}, m {steps}, eta {:.4}, {n_seeds} seeds",
            base.learning_rate
        ),
    ))
}

fn history_fixture() -> Result<(TaskStream, ModelSpec, CalibratorState)> {
    let stream = small_stream(3, 2, 12, 0.25, 61)?;
    let model = ModelSpec::softmax(3, stream.class_count(), 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let snapshot = random_theta(&model, 0.3, &mut rng);
    let mut state = CalibratorState::new(snapshot);
    state.task_transition(&model, &stream.tasks()[0].train, TaskWeighting::UniformTask)?;
    Ok((stream, model, state))
}

/// At `θ = θ̃` the calibrated estimators ignore the drawn batches: the result
/// is bit-identical across `draws` independent draws.
pub fn check_snapshot_determinism(draws: usize) -> Result<PropertyReport> {
    let (stream, model, state) = history_fixture()?;
    let history = &stream.tasks()[0].train;
    let current = &stream.tasks()[1].train;
    let seen = stream.train_prefix(2);
    let theta = state.theta_snapshot().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let mut mismatches = 0usize;
    for method in [Method::Dgc, Method::Ssvrg, Method::SvrgJoint] {
        let ctx = StageContext::prepare(
            method,
            &model,
            &state,
            TaskWeights::uniform(2),
            current,
            history,
            &seen,
            0.0,
            CombinedForm::CurrentTask,
        )?;
        let pool: &[Sample] = if method == Method::SvrgJoint {
            &seen
        } else {
            current
        };
        let mut first: Option<ParameterVector> = None;
        for _ in 0..draws {
            let b = rng.random_range(1..=6);
            let cur = draw_with_replacement(pool, b, &mut rng);
            let buf = draw_with_replacement(history, b, &mut rng);
            let v = ctx.estimate(&cur, Some(&buf), &theta)?.vector;
            match &first {
                None => first = Some(v),
                Some(f) if f.as_slice() != v.as_slice() => mismatches += 1,
                Some(_) => {}
            }
        }
    }
    Ok(PropertyReport::at_most(
        "snapshot_determinism",
        mismatches as f64,
        0.0,
        format!("{draws} draws x DGC, SSVRG, SVRG-joint"),
    ))
}

/// Bitwise reductions: a single-task DGC run equals the SVRG run; the
/// combined estimator at `α = 1` is DGC and at `α = 0` its historical term
/// is the replay term.
pub fn check_reductions() -> Result<PropertyReport> {
    let mut mismatches = 0usize;
    let single = small_stream(3, 1, 20, 0.25, 71)?;
    let model = ModelSpec::softmax(3, single.class_count(), 0.01);
    let base = TrainConfig {
        steps_per_stage: 15,
        stages_per_task: 2,
        batch_size: 4,
        learning_rate: 0.1,
        buffer_capacity: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let dgc = run_cil(
        &single,
        &model,
        &TrainConfig {
            method: Method::Dgc,
            ..base.clone()
        },
    )?;
    let svrg = run_cil(
        &single,
        &model,
        &TrainConfig {
            method: Method::SvrgJoint,
            ..base.clone()
        },
    )?;
    if dgc.theta.as_slice() != svrg.theta.as_slice() || dgc.loss != svrg.loss {
        mismatches += 1;
    }

    let multi = small_stream(3, 3, 20, 0.25, 72)?;
    let model = ModelSpec::softmax(3, multi.class_count(), 0.01);
    let plain = run_cil(
        &multi,
        &model,
        &TrainConfig {
            method: Method::Dgc,
            ..base.clone()
        },
    )?;
    let combined = run_cil(
        &multi,
        &model,
        &TrainConfig {
            method: Method::DgcCombined,
            alpha: 1.0,
            ..base.clone()
        },
    )?;
    if plain.theta.as_slice() != combined.theta.as_slice() || plain.loss != combined.loss {
        mismatches += 1;
    }

    let (stream, model, state) = history_fixture()?;
    let history = &stream.tasks()[0].train;
    let current = &stream.tasks()[1].train;
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let theta = random_theta(&model, 0.3, &mut rng);
    let ctx = StageContext::prepare(
        Method::DgcCombined,
        &model,
        &state,
        TaskWeights::uniform(2),
        current,
        history,
        &[],
        0.0,
        CombinedForm::CurrentTask,
    )?;
    for _ in 0..20 {
        let cur = draw_with_replacement(current, 4, &mut rng);
        let buf = draw_with_replacement(history, 4, &mut rng);
        let c = ctx
            .estimate(&cur, Some(&buf), &theta)?
            .diagnostics
            .historical_term;
        let e = er_estimate(&model, &cur, Some(&buf), &theta, TaskWeights::uniform(2))?
            .diagnostics
            .historical_term;
        if c.as_ref().map(|v| v.as_slice()) != e.as_ref().map(|v| v.as_slice()) {
            mismatches += 1;
        }
    }
    Ok(PropertyReport::at_most(
        "reduction_identities",
        mismatches as f64,
        0.0,
        "single-task DGC vs SVRG, alpha 1 vs DGC, alpha 0 vs ER",
    ))
}

/// Inclusion frequency of every stream position after reservoir sampling,
/// `capacity = 2, n = 3` and `capacity = 10, n = 100`. Measured: worst
/// |frequency − capacity/n| in binomial standard deviations.
pub fn check_reservoir_law(n_seeds: u64) -> Result<PropertyReport> {
    let mut worst = 0.0f64;
    for (capacity, n) in [(2usize, 3usize), (10, 100)] {
        let data: Vec<Sample> = (0..n)
            .map(|i| Sample::new(vec![i as f64], i as u32))
            .collect();
        let mut counts = vec![0u64; n];
        for seed in 0..n_seeds {
            let mut buf = ReservoirBuffer::with_seed(capacity, seed)?;
            buf.memory_update(&data);
            for s in buf.items() {
                counts[s.label as usize] += 1;
            }
        }
        let p = capacity as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n_seeds as f64).sqrt();
        for c in counts {
            worst = worst.max((c as f64 / n_seeds as f64 - p).abs() / sigma);
        }
    }
    Ok(PropertyReport::at_most(
        "reservoir_inclusion",
        worst,
        3.0,
        format!("{n_seeds} seeds, (2 of 3) and (10 of 100)"),
    ))
}

/// Every method performs exactly `T·S·m` updates.
pub fn check_step_accounting() -> Result<PropertyReport> {
    let stream = small_stream(3, 3, 8, 0.25, 81)?;
    let model = ModelSpec::softmax(3, stream.class_count(), 0.01);
    let mut off = 0u64;
    for method in Method::ALL {
        let cfg = TrainConfig {
            method,
            steps_per_stage: 7,
            stages_per_task: 2,
            batch_size: 3,
            buffer_capacity: 5,
            ..TrainConfig::default()
        };
        let run = run_cil(&stream, &model, &cfg)?;
        off += run.steps.abs_diff(3 * 2 * 7);
    }
    Ok(PropertyReport::at_most(
        "step_accounting",
        off as f64,
        0.0,
        "T=3, S=2, m=7, every method",
    ))
}

/// AA, FAIA, FAA and FF on `[[1.0], [0.5, 1.0]]` against 1.0/0.75, 0.875, 0.75, 0.5.
pub fn check_metric_arithmetic() -> Result<PropertyReport> {
    let m = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.5, 1.0]])?;
    let got = [aa(&m, 1)?, aa(&m, 2)?, faia(&m)?, faa(&m)?, ff(&m)?];
    let want = [1.0, 0.75, 0.875, 0.75, 0.5];
    let worst = got
        .iter()
        .zip(&want)
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    Ok(PropertyReport::at_most(
        "metric_arithmetic",
        worst,
        0.0,
        "hand matrix [[1.0], [0.5, 1.0]]",
    ))
}
