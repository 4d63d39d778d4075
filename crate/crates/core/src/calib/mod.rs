//! Gradient estimators and the continual-learning training loops.
//!
//! Every method computes a step direction `v` from a current-task batch and
//! (after the first task) a replay batch, and applies `θ ← θ − η·v`:
//!
//! * **ER**: `v = w_c·∇ℓ(cur, θ) + w_h·∇ℓ(buf, θ)`.
//! * **SVRG-joint**: plain SVRG over all data seen so far (unbounded memory).
//!   Diagnostic reference only.
//! * **SSVRG**: both terms SVRG-calibrated at the stage snapshot `θ̃`, the
//!   replay term against `G(ℳ_t, θ̃)`.
//! * **DGC**: the replay term is `Γ(t,k) = ∇ℓ(buf, θ) − ∇ℓ(buf, θ̃) + Γ′(t)`.
//!   `Γ′(t)` is a running, unbiased stand-in for the full historical gradient
//!   `G(𝒯_[1:t), θ̃)`. It is refreshed at every stage end and folded forward
//!   at every task transition.
//! * **DGC-combined**: replay term `α·Γ(t,k) + (1−α)·∇ℓ(buf, θ)`.
//!
//! The weights `(w_c, w_h)` are `(1/t, (t−1)/t)` for equal-size tasks or
//! proportional to the task sizes (see [`TaskWeighting`]).

mod estimators;
mod replay;
mod state;
mod train;
mod variance;

pub use estimators::{
    dgc_combined_estimate, dgc_estimate, dgc_gamma, er_estimate, ssvrg_estimate, svrg_estimate,
    svrg_prepare, Diagnostics, GradientEstimate, StageContext,
};
pub use replay::{replay_calibrator, CalibratorEvent, TransitionFn};
pub use state::CalibratorState;
pub use train::{run_cil, run_tfcl, RunOutput};
pub use variance::estimator_variance;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ER")]
    Er,
    #[serde(rename = "SVRG-joint")]
    SvrgJoint,
    #[serde(rename = "SSVRG")]
    Ssvrg,
    #[serde(rename = "DGC")]
    Dgc,
    #[serde(rename = "DGC-combined")]
    DgcCombined,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Er,
        Method::SvrgJoint,
        Method::Ssvrg,
        Method::Dgc,
        Method::DgcCombined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Er => "ER",
            Method::SvrgJoint => "SVRG-joint",
            Method::Ssvrg => "SSVRG",
            Method::Dgc => "DGC",
            Method::DgcCombined => "DGC-combined",
        }
    }

    /// Methods that keep a snapshot and a reference gradient alongside the model.
    pub fn uses_calibration(self) -> bool {
        !matches!(self, Method::Er)
    }

    /// Methods that maintain the recursive `Γ′` term.
    pub fn maintains_gamma(self) -> bool {
        matches!(self, Method::Dgc | Method::DgcCombined)
    }

    /// Methods that replay from the bounded reservoir.
    pub fn uses_buffer(self) -> bool {
        !matches!(self, Method::SvrgJoint)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!(
                    "unknown method `{s}`; valid methods are {}",
                    names.join(", ")
                ))
            })
    }
}

/// How the current-task and historical terms are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskWeighting {
    /// `1/t` and `(t−1)/t`; exact for equal-size tasks.
    #[default]
    UniformTask,
    /// `|𝒯_t| / Σ|𝒯_c|` and `Σ_{c<t}|𝒯_c| / Σ|𝒯_c|`.
    SizeWeighted,
}

/// First-bracket calibration used by [`Method::DgcCombined`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinedForm {
    /// Calibrate the current-task gradient with the same current-task sample at
    /// `θ̃`, which keeps the estimator unbiased.
    #[default]
    CurrentTask,
    /// Calibrate with the replay sample at `θ̃` instead.
    Literal,
}

/// How `Γ′` is refreshed at a stage end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageEndMode {
    /// One fresh replay batch of size `b`.
    #[default]
    Sampled,
    /// Average over the whole buffer (turns expectations into identities).
    Exhaustive,
}

/// Coefficients of the current-task and historical terms at task `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub current: f64,
    pub history: f64,
}

impl TaskWeights {
    pub fn uniform(t: usize) -> Self {
        assert!(t >= 1, "task index is 1-based");
        let t = t as f64;
        TaskWeights {
            current: 1.0 / t,
            history: (t - 1.0) / t,
        }
    }

    pub fn size_weighted(current_size: usize, history_size: usize) -> Self {
        let total = (current_size + history_size) as f64;
        TaskWeights {
            current: current_size as f64 / total,
            history: history_size as f64 / total,
        }
    }

    pub fn for_task(
        weighting: TaskWeighting,
        t: usize,
        current_size: usize,
        history_size: usize,
    ) -> Self {
        match weighting {
            TaskWeighting::UniformTask => Self::uniform(t),
            TaskWeighting::SizeWeighted => Self::size_weighted(current_size, history_size),
        }
    }

    /// `false` at the first task, where every historical term is dropped.
    pub fn has_history(&self) -> bool {
        self.history > 0.0
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    /// `m`: SGD steps per stage (TFCL: micro-tasks between snapshot refreshes).
    pub steps_per_stage: usize,
    /// `S`: stages per task (ignored in TFCL).
    pub stages_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Mixing weight of DGC-combined.
    pub alpha: f64,
    pub task_weighting: TaskWeighting,
    pub buffer_capacity: usize,
    pub stage_end: StageEndMode,
    pub combined_form: CombinedForm,
    /// Steps between loss evaluations; 0 means `max(1, m/10)`.
    pub loss_interval: usize,
    /// TFCL micro-tasks between AA evaluations; 0 means evaluate only at task completions.
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Dgc,
            steps_per_stage: 200,
            stages_per_task: 1,
            batch_size: 32,
            learning_rate: 0.05,
            alpha: 1e-3,
            task_weighting: TaskWeighting::UniformTask,
            buffer_capacity: 200,
            stage_end: StageEndMode::Sampled,
            combined_form: CombinedForm::CurrentTask,
            loss_interval: 0,
            eval_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_stage == 0 || self.stages_per_task == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "steps_per_stage, stages_per_task and batch_size must be at least 1",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("buffer_capacity must be at least 1"));
        }
        Ok(())
    }

    pub fn effective_loss_interval(&self) -> usize {
        if self.loss_interval == 0 {
            (self.steps_per_stage / 10).max(1)
        } else {
            self.loss_interval
        }
    }
}
