use serde::Serialize;

use super::TaskWeighting;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Sample};
use crate::params::ParameterVector;

/// Recursive calibration state: `Γ′(t)`, the snapshot `θ̃_t` and counters.
///
/// `Γ′(1) = 0`. At a stage end `Γ′ ← Γ(t, m+1)` evaluated at the stage's final
/// parameter, and the snapshot moves there. At a task transition
/// `Γ′(t+1) = ((t−1)·Γ′(t) + G(𝒯_t, θ̃_t)) / t` (or its size-weighted analogue).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibratorState {
    gamma_prime: ParameterVector,
    theta_snapshot: ParameterVector,
    task_index: usize,
    stage_index: usize,
    step_index: u64,
    history_size: usize,
}

impl CalibratorState {
    pub fn new(theta0: ParameterVector) -> Self {
        CalibratorState {
            gamma_prime: ParameterVector::zeros(theta0.dim()),
            theta_snapshot: theta0,
            task_index: 1,
            stage_index: 0,
            step_index: 0,
            history_size: 0,
        }
    }

    pub fn gamma_prime(&self) -> &ParameterVector {
        &self.gamma_prime
    }

    pub fn theta_snapshot(&self) -> &ParameterVector {
        &self.theta_snapshot
    }

    /// Current task index `t` (1-based).
    pub fn task_index(&self) -> usize {
        self.task_index
    }

    /// Completed stages within the current task.
    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    /// Steps taken within the current stage.
    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    /// Training samples in all finished tasks.
    pub fn history_size(&self) -> usize {
        self.history_size
    }

    pub fn set_gamma_prime(&mut self, gamma: ParameterVector) {
        debug_assert_eq!(gamma.dim(), self.gamma_prime.dim());
        self.gamma_prime = gamma;
    }

    pub(crate) fn record_steps(&mut self, n: u64) {
        self.step_index += n;
    }

    /// Moves the snapshot without touching `Γ′` (methods without the recursion).
    pub fn advance_snapshot(&mut self, theta_end: &ParameterVector) {
        self.theta_snapshot = theta_end.clone();
        self.stage_index += 1;
        self.step_index = 0;
    }

    /// Stage end: `Γ′ ← ∇ℓ(replay, θ_end) − ∇ℓ(replay, θ̃) + Γ′`, then `θ̃ ← θ_end`.
    ///
    /// `replay` is a fresh replay batch, or the whole buffer in exhaustive
    /// mode. At `t = 1` there is no history and only the snapshot moves.
    pub fn stage_end(
        &mut self,
        model: &ModelSpec,
        replay: &[Sample],
        theta_end: &ParameterVector,
    ) -> Result<()> {
        if self.task_index > 1 {
            if replay.is_empty() {
                return Err(Error::state(
                    "stage end needs replay data once history exists",
                ));
            }
            let at_end = model.gradient(replay, theta_end)?;
            let at_snapshot = model.gradient(replay, &self.theta_snapshot)?;
            self.gamma_prime =
                ParameterVector::calibrated(&at_end, &at_snapshot, &self.gamma_prime);
        }
        self.advance_snapshot(theta_end);
        Ok(())
    }

    /// Task transition: folds `G(𝒯_t, θ̃_t)` into `Γ′` and advances `t`.
    ///
    /// Uses the current snapshot, which the last stage end has already moved
    /// to the task's final parameter.
    pub fn task_transition(
        &mut self,
        model: &ModelSpec,
        task_data: &[Sample],
        weighting: TaskWeighting,
    ) -> Result<()> {
        if task_data.is_empty() {
            return Err(Error::domain(
                "task transition needs the finished task's data",
            ));
        }
        let task_gradient = model.full_gradient(task_data, &self.theta_snapshot)?;
        self.fold_task_gradient(&task_gradient, task_data.len(), weighting);
        Ok(())
    }

    /// The arithmetic of [`CalibratorState::task_transition`] for a precomputed
    /// `G(𝒯_t, θ̃_t)` of a task with `task_size` samples.
    pub fn fold_task_gradient(
        &mut self,
        task_gradient: &ParameterVector,
        task_size: usize,
        weighting: TaskWeighting,
    ) {
        let t = self.task_index as f64;
        let h = self.history_size as f64;
        let n = task_size as f64;
        let folded: Vec<f64> = self
            .gamma_prime
            .iter()
            .zip(task_gradient.iter())
            .map(|(g_prev, g_task)| match weighting {
                TaskWeighting::UniformTask => ((t - 1.0) * g_prev + g_task) / t,
                TaskWeighting::SizeWeighted => (h * g_prev + n * g_task) / (h + n),
            })
            .collect();
        self.gamma_prime = ParameterVector::from_vec_unchecked(folded);
        self.advance_task(task_size);
    }

    /// Advances `t` without touching `Γ′` (methods without the recursion).
    pub fn advance_task(&mut self, task_size: usize) {
        self.history_size += task_size;
        self.task_index += 1;
        self.stage_index = 0;
        self.step_index = 0;
    }
}
