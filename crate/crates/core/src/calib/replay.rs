//! Re-running the `Γ′` recursion along a recorded parameter trajectory.
//!
//! With the snapshots fixed, the only randomness left is the reservoir and
//! the stage-end replay draws. This makes the expectation of `Γ′` over buffer
//! seeds directly comparable with the full historical gradient at the same
//! snapshots.

use super::{CalibratorState, StageEndMode, TaskWeighting};
use crate::buffer::ReservoirBuffer;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Sample};
use crate::params::ParameterVector;
use crate::seed::{rng_for, Substream};
use crate::stream::TaskStream;

/// Signature of a task-transition rule; [`CalibratorState::task_transition`]
/// is the real one. Replacing it lets checks confirm they detect a broken rule.
pub type TransitionFn =
    fn(&mut CalibratorState, &ModelSpec, &[Sample], TaskWeighting) -> Result<()>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibratorEvent {
    /// After stage `stage` (1-based) of task `task`.
    StageEnd { task: usize, stage: usize },
    /// After the transition out of task `task`.
    Transition { task: usize },
}

/// Replays the calibrator along `snapshots` (as recorded in
/// `RunOutput::stage_snapshots`) with a fresh reservoir seeded from `seed`.
///
/// `observer` sees the state after every stage end and transition.
#[allow(clippy::too_many_arguments)]
pub fn replay_calibrator<F>(
    model: &ModelSpec,
    stream: &TaskStream,
    snapshots: &[Vec<ParameterVector>],
    buffer_capacity: usize,
    stage_end: StageEndMode,
    batch_size: usize,
    seed: u64,
    weighting: TaskWeighting,
    transition: TransitionFn,
    mut observer: F,
) -> Result<CalibratorState>
where
    F: FnMut(CalibratorEvent, &CalibratorState) -> Result<()>,
{
    if snapshots.len() != stream.len() {
        return Err(Error::config(format!(
            "{} snapshot lists for {} tasks",
            snapshots.len(),
            stream.len()
        )));
    }
    let first = snapshots
        .first()
        .and_then(|s| s.first())
        .ok_or_else(|| Error::config("empty trajectory"))?;
    let mut state = CalibratorState::new(first.clone());
    let mut buffer = ReservoirBuffer::new(buffer_capacity, rng_for(seed, Substream::Buffer))?;
    for (ti, (task, stages)) in stream.tasks().iter().zip(snapshots).enumerate() {
        let t = ti + 1;
        for (s, theta_end) in stages.iter().enumerate().skip(1) {
            if t > 1 {
                let replay = match stage_end {
                    StageEndMode::Sampled => buffer.sample_batch(batch_size)?.into_inner(),
                    StageEndMode::Exhaustive => buffer.enumerate_all(),
                };
                state.stage_end(model, &replay, theta_end)?;
            } else {
                state.advance_snapshot(theta_end);
            }
            observer(CalibratorEvent::StageEnd { task: t, stage: s }, &state)?;
        }
        buffer.memory_update(&task.train);
        transition(&mut state, model, &task.train, weighting)?;
        observer(CalibratorEvent::Transition { task: t }, &state)?;
    }
    Ok(state)
}
