use serde::Serialize;

use super::{CalibratorState, Method, StageContext, StageEndMode, TaskWeights, TrainConfig};
use crate::buffer::ReservoirBuffer;
use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, LossTrajectory};
use crate::model::{ModelSpec, Sample};
use crate::params::ParameterVector;
use crate::seed::{rng_for, Substream};
use crate::stream::{draw_with_replacement, StreamMode, TaskStream};

/// Everything a training run produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub method: Method,
    pub theta: ParameterVector,
    pub accuracy: AccuracyMatrix,
    pub loss: LossTrajectory,
    pub calibrator: CalibratorState,
    /// `(micro-task count, AA)` at the configured TFCL evaluation points;
    /// `(task index, AA)` for CIL runs.
    pub aa_series: Vec<(u64, f64)>,
    /// Snapshot parameters per task: the start-of-task snapshot followed by
    /// the parameter at the end of every stage (CIL) or refresh (TFCL).
    pub stage_snapshots: Vec<Vec<ParameterVector>>,
    pub steps: u64,
    pub buffer_items: usize,
}

struct Setup {
    theta: ParameterVector,
    buffer: ReservoirBuffer,
    batch_rng: rand_chacha::ChaCha8Rng,
}

fn setup(stream: &TaskStream, model: &ModelSpec, config: &TrainConfig) -> Result<Setup> {
    config.validate()?;
    model.validate()?;
    if stream.dim() != model.input_dim {
        return Err(Error::config(format!(
            "stream dimension {} does not match model input dimension {}",
            stream.dim(),
            model.input_dim
        )));
    }
    if model.kind.is_classifier() && stream.class_count() > model.class_count {
        return Err(Error::config(format!(
            "stream has {} classes but the model only {}",
            stream.class_count(),
            model.class_count
        )));
    }
    let theta = model.init_params(&mut rng_for(config.seed, Substream::Init));
    let buffer = ReservoirBuffer::new(
        config.buffer_capacity,
        rng_for(config.seed, Substream::Buffer),
    )?;
    Ok(Setup {
        theta,
        buffer,
        batch_rng: rng_for(config.seed, Substream::Batch),
    })
}

fn replay_for_stage_end(
    buffer: &mut ReservoirBuffer,
    mode: StageEndMode,
    batch_size: usize,
) -> Result<Vec<Sample>> {
    match mode {
        StageEndMode::Sampled => Ok(buffer.sample_batch(batch_size)?.into_inner()),
        StageEndMode::Exhaustive => Ok(buffer.enumerate_all()),
    }
}

/// Class-incremental training: for each task, `S` stages of `m` steps.
///
/// Per stage the method's reference gradients are computed at the snapshot;
/// per step one current-task batch and (from the second task on) one replay
/// batch are drawn and `θ ← θ − η·v`. At the stage end DGC methods refresh
/// `Γ′` and every method moves its snapshot to the current parameter. After
/// the task, the accuracy row is recorded, the reservoir absorbs the task and
/// DGC methods fold the task gradient into `Γ′`.
pub fn run_cil(stream: &TaskStream, model: &ModelSpec, config: &TrainConfig) -> Result<RunOutput> {
    if stream.mode() != StreamMode::Cil {
        return Err(Error::config("run_cil expects a class-incremental stream"));
    }
    let Setup {
        mut theta,
        mut buffer,
        mut batch_rng,
    } = setup(stream, model, config)?;
    let method = config.method;
    let tasks = stream.tasks();
    let mut state = CalibratorState::new(theta.clone());
    let mut accuracy = AccuracyMatrix::new(tasks.len());
    let mut loss = LossTrajectory::new();
    let mut aa_series = Vec::with_capacity(tasks.len());
    let mut stage_snapshots = Vec::with_capacity(tasks.len());
    let mut seen: Vec<Sample> = Vec::new();
    let loss_every = config.effective_loss_interval() as u64;
    let mut steps = 0u64;

    for (ti, task) in tasks.iter().enumerate() {
        let t = ti + 1;
        let weights = TaskWeights::for_task(
            config.task_weighting,
            t,
            task.train.len(),
            state.history_size(),
        );
        seen.extend(task.train.iter().cloned());
        if steps == 0 {
            loss.push(0, model.loss(&seen, &theta)?)?;
        }
        let replay_history = weights.has_history() && method.uses_buffer();
        let mut snapshots = vec![state.theta_snapshot().clone()];

        for _stage in 0..config.stages_per_task {
            {
                let ctx = StageContext::prepare(
                    method,
                    model,
                    &state,
                    weights,
                    &task.train,
                    buffer.items(),
                    &seen,
                    config.alpha,
                    config.combined_form,
                )?;
                let pool: &[Sample] = if method == Method::SvrgJoint {
                    &seen
                } else {
                    &task.train
                };
                for _ in 0..config.steps_per_stage {
                    let cur = draw_with_replacement(pool, config.batch_size, &mut batch_rng);
                    let replay = if replay_history {
                        Some(buffer.sample_batch(config.batch_size)?)
                    } else {
                        None
                    };
                    let v = ctx.estimate(&cur, replay.as_deref(), &theta)?;
                    theta.axpy(-config.learning_rate, &v.vector);
                    if !theta.is_finite() {
                        return Err(Error::domain(format!(
                            "parameters diverged at step {} (learning rate {})",
                            steps + 1,
                            config.learning_rate
                        )));
                    }
                    steps += 1;
                    if steps.is_multiple_of(loss_every) {
                        loss.push(steps, model.loss(&seen, &theta)?)?;
                    }
                }
            }
            state.record_steps(config.steps_per_stage as u64);
            if method.maintains_gamma() && weights.has_history() {
                let replay =
                    replay_for_stage_end(&mut buffer, config.stage_end, config.batch_size)?;
                state.stage_end(model, &replay, &theta)?;
            } else {
                state.advance_snapshot(&theta);
            }
            snapshots.push(theta.clone());
        }
        stage_snapshots.push(snapshots);

        let row = tasks[..=ti]
            .iter()
            .map(|past| model.predict_accuracy(&past.test, &theta))
            .collect::<Result<Vec<f64>>>()?;
        aa_series.push((t as u64, row.iter().sum::<f64>() / row.len() as f64));
        accuracy.push_row(row)?;

        if method.uses_buffer() {
            buffer.memory_update(&task.train);
        }
        if method.maintains_gamma() {
            state.task_transition(model, &task.train, config.task_weighting)?;
        } else {
            state.advance_task(task.train.len());
        }
    }
    if loss.points().last().map(|p| p.0) != Some(steps) {
        loss.push(steps, model.loss(&seen, &theta)?)?;
    }

    Ok(RunOutput {
        method,
        theta,
        accuracy,
        loss,
        calibrator: state,
        aa_series,
        stage_snapshots,
        steps,
        buffer_items: if method.uses_buffer() {
            buffer.len()
        } else {
            seen.len()
        },
    })
}

/// Task-free training: one step per incoming micro-task.
///
/// The micro-task itself is the current batch. Every `m` micro-tasks
/// (whenever `(t − 1) mod m = 0`) the snapshot is refreshed, and DGC methods
/// update `Γ′` from a replay draw at the new parameter. After every
/// micro-task the reservoir absorbs it and DGC methods fold its gradient at
/// the snapshot into `Γ′`. The trainer only sees micro-task training data;
/// held-out splits are consulted by the evaluator after each step.
pub fn run_tfcl(stream: &TaskStream, model: &ModelSpec, config: &TrainConfig) -> Result<RunOutput> {
    if stream.mode() != StreamMode::Tfcl {
        return Err(Error::config("run_tfcl expects a task-free stream"));
    }
    let Setup {
        mut theta,
        mut buffer,
        mut batch_rng,
    } = setup(stream, model, config)?;
    let method = config.method;
    let holdouts = stream.holdouts();
    let mut state = CalibratorState::new(theta.clone());
    let mut accuracy = AccuracyMatrix::new(holdouts.len());
    let mut loss = LossTrajectory::new();
    let mut aa_series = Vec::new();
    let mut stage_snapshots = vec![vec![theta.clone()]];
    let mut seen: Vec<Sample> = Vec::new();
    let loss_every = config.effective_loss_interval() as u64;
    let refresh_every = config.steps_per_stage;
    let mut steps = 0u64;
    let mut next_row = 0usize;

    for (ti, micro) in stream.tasks().iter().enumerate() {
        let t = ti + 1;
        let current = &micro.train;
        let weights = TaskWeights::for_task(
            config.task_weighting,
            t,
            current.len(),
            state.history_size(),
        );
        seen.extend(current.iter().cloned());
        if steps == 0 {
            loss.push(0, model.loss(&seen, &theta)?)?;
        }
        let replay_history = weights.has_history() && method.uses_buffer();
        {
            let ctx = StageContext::prepare(
                method,
                model,
                &state,
                weights,
                current,
                buffer.items(),
                &seen,
                config.alpha,
                config.combined_form,
            )?;
            let joint_batch;
            let cur: &[Sample] = if method == Method::SvrgJoint {
                joint_batch = draw_with_replacement(&seen, current.len(), &mut batch_rng);
                &joint_batch
            } else {
                current
            };
            let replay = if replay_history {
                Some(buffer.sample_batch(config.batch_size)?)
            } else {
                None
            };
            let v = ctx.estimate(cur, replay.as_deref(), &theta)?;
            theta.axpy(-config.learning_rate, &v.vector);
            if !theta.is_finite() {
                return Err(Error::domain(format!(
                    "parameters diverged at micro-task {t} (learning rate {})",
                    config.learning_rate
                )));
            }
        }
        steps += 1;
        state.record_steps(1);

        if (t - 1) % refresh_every == 0 {
            if method.maintains_gamma() && weights.has_history() {
                let replay =
                    replay_for_stage_end(&mut buffer, config.stage_end, config.batch_size)?;
                state.stage_end(model, &replay, &theta)?;
            } else {
                state.advance_snapshot(&theta);
            }
            stage_snapshots
                .last_mut()
                .expect("at least one snapshot list")
                .push(theta.clone());
        }
        if method.uses_buffer() {
            buffer.memory_update(current);
        }
        if method.maintains_gamma() {
            state.task_transition(model, current, config.task_weighting)?;
        } else {
            state.advance_task(current.len());
        }
        if steps.is_multiple_of(loss_every) {
            loss.push(steps, model.loss(&seen, &theta)?)?;
        }

        // evaluation (outside the training algorithm)
        if config.eval_interval > 0 && t % config.eval_interval == 0 {
            let arrived: Vec<_> = holdouts.iter().filter(|h| h.arrival <= ti).collect();
            if !arrived.is_empty() {
                let mut total = 0.0;
                for h in &arrived {
                    total += model.predict_accuracy(&h.test, &theta)?;
                }
                aa_series.push((t as u64, total / arrived.len() as f64));
            }
        }
        while next_row < holdouts.len() && holdouts[next_row].completion == ti {
            let row = holdouts[..=next_row]
                .iter()
                .map(|h| model.predict_accuracy(&h.test, &theta))
                .collect::<Result<Vec<f64>>>()?;
            if config.eval_interval == 0 {
                aa_series.push((t as u64, row.iter().sum::<f64>() / row.len() as f64));
            }
            accuracy.push_row(row)?;
            next_row += 1;
        }
    }
    if loss.points().last().map(|p| p.0) != Some(steps) {
        loss.push(steps, model.loss(&seen, &theta)?)?;
    }

    Ok(RunOutput {
        method,
        theta,
        accuracy,
        loss,
        calibrator: state,
        aa_series,
        stage_snapshots,
        steps,
        buffer_items: if method.uses_buffer() {
            buffer.len()
        } else {
            seen.len()
        },
    })
}
