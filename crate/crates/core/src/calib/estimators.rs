use serde::Serialize;

use super::{CalibratorState, CombinedForm, Method, TaskWeights};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Sample};
use crate::params::ParameterVector;

/// Per-term breakdown of an estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Current-task bracket before weighting.
    pub current_term: ParameterVector,
    /// Historical bracket before weighting; `None` at the first task.
    pub historical_term: Option<ParameterVector>,
    /// Norm of the historical reference (`Γ′`, `μ̃`) when one is used.
    pub calibrator_norm: Option<f64>,
}

/// A step direction `v` together with its components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientEstimate {
    pub vector: ParameterVector,
    pub diagnostics: Diagnostics,
}

impl GradientEstimate {
    fn combine(
        weights: TaskWeights,
        current: ParameterVector,
        historical: Option<ParameterVector>,
        calibrator_norm: Option<f64>,
    ) -> Self {
        let vector = match &historical {
            Some(h) => ParameterVector::weighted_sum(weights.current, &current, weights.history, h),
            None => current.clone(),
        };
        GradientEstimate {
            vector,
            diagnostics: Diagnostics {
                current_term: current,
                historical_term: historical,
                calibrator_norm,
            },
        }
    }
}

fn require_history(weights: TaskWeights, buffer: Option<&[Sample]>) -> Result<Option<&[Sample]>> {
    if !weights.has_history() {
        return Ok(None);
    }
    match buffer {
        Some(b) if !b.is_empty() => Ok(Some(b)),
        _ => Err(Error::state(
            "a replay batch is required once historical tasks exist",
        )),
    }
}

/// Experience replay: `w_c·∇ℓ(cur, θ) + w_h·∇ℓ(buf, θ)`.
pub fn er_estimate(
    model: &ModelSpec,
    current: &[Sample],
    buffer: Option<&[Sample]>,
    theta: &ParameterVector,
    weights: TaskWeights,
) -> Result<GradientEstimate> {
    let cur = model.gradient(current, theta)?;
    let hist = match require_history(weights, buffer)? {
        Some(b) => Some(model.gradient(b, theta)?),
        None => None,
    };
    Ok(GradientEstimate::combine(weights, cur, hist, None))
}

/// SVRG reference gradient `μ̃ = G(P, θ̃)`.
pub fn svrg_prepare(
    model: &ModelSpec,
    dataset: &[Sample],
    snapshot: &ParameterVector,
) -> Result<ParameterVector> {
    model.full_gradient(dataset, snapshot)
}

/// SVRG step direction `∇ℓ(batch, θ) − (∇ℓ(batch, θ̃) − μ̃)`.
pub fn svrg_estimate(
    model: &ModelSpec,
    batch: &[Sample],
    theta: &ParameterVector,
    snapshot: &ParameterVector,
    mu_tilde: &ParameterVector,
) -> Result<GradientEstimate> {
    let term = calibrated_term(model, batch, theta, snapshot, mu_tilde)?;
    Ok(GradientEstimate::combine(
        TaskWeights::uniform(1),
        term,
        None,
        Some(mu_tilde.norm()),
    ))
}

fn calibrated_term(
    model: &ModelSpec,
    batch: &[Sample],
    theta: &ParameterVector,
    snapshot: &ParameterVector,
    reference: &ParameterVector,
) -> Result<ParameterVector> {
    let at_theta = model.gradient(batch, theta)?;
    let at_snapshot = model.gradient(batch, snapshot)?;
    Ok(ParameterVector::calibrated(
        &at_theta,
        &at_snapshot,
        reference,
    ))
}

/// Streaming SVRG: both brackets calibrated at `θ̃`, the current one against
/// `ṽ = G(𝒯_t, θ̃)` and the replay one against `μ̃ = G(ℳ_t, θ̃)`.
#[allow(clippy::too_many_arguments)]
pub fn ssvrg_estimate(
    model: &ModelSpec,
    current: &[Sample],
    buffer: Option<&[Sample]>,
    theta: &ParameterVector,
    snapshot: &ParameterVector,
    v_tilde: &ParameterVector,
    mu_tilde: Option<&ParameterVector>,
    weights: TaskWeights,
) -> Result<GradientEstimate> {
    let cur = calibrated_term(model, current, theta, snapshot, v_tilde)?;
    let (hist, norm) = match require_history(weights, buffer)? {
        Some(b) => {
            let mu = mu_tilde
                .ok_or_else(|| Error::state("SSVRG needs the buffer reference gradient"))?;
            (
                Some(calibrated_term(model, b, theta, snapshot, mu)?),
                Some(mu.norm()),
            )
        }
        None => (None, None),
    };
    Ok(GradientEstimate::combine(weights, cur, hist, norm))
}

/// `Γ(t,k) = ∇ℓ(buf, θ) − (∇ℓ(buf, θ̃) − Γ′(t))`.
pub fn dgc_gamma(
    model: &ModelSpec,
    state: &CalibratorState,
    buffer: &[Sample],
    theta: &ParameterVector,
) -> Result<ParameterVector> {
    if buffer.is_empty() {
        return Err(Error::state("Γ needs a non-empty replay batch"));
    }
    calibrated_term(
        model,
        buffer,
        theta,
        state.theta_snapshot(),
        state.gamma_prime(),
    )
}

/// DGC direction: `w_c·[∇ℓ(cur, θ) − ∇ℓ(cur, θ̃) + ṽ] + w_h·Γ(t,k)`.
pub fn dgc_estimate(
    model: &ModelSpec,
    state: &CalibratorState,
    current: &[Sample],
    buffer: Option<&[Sample]>,
    theta: &ParameterVector,
    v_tilde: &ParameterVector,
    weights: TaskWeights,
) -> Result<GradientEstimate> {
    let cur = calibrated_term(model, current, theta, state.theta_snapshot(), v_tilde)?;
    let hist = match require_history(weights, buffer)? {
        Some(b) => Some(dgc_gamma(model, state, b, theta)?),
        None => None,
    };
    let norm = hist.as_ref().map(|_| state.gamma_prime().norm());
    Ok(GradientEstimate::combine(weights, cur, hist, norm))
}

/// DGC combined with plain replay: historical bracket
/// `α·Γ(t,k) + (1−α)·∇ℓ(buf, θ)`, with the same replay batch in both parts.
#[allow(clippy::too_many_arguments)]
pub fn dgc_combined_estimate(
    model: &ModelSpec,
    state: &CalibratorState,
    current: &[Sample],
    buffer: Option<&[Sample]>,
    theta: &ParameterVector,
    v_tilde: &ParameterVector,
    weights: TaskWeights,
    alpha: f64,
    form: CombinedForm,
) -> Result<GradientEstimate> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let snapshot = state.theta_snapshot();
    let Some(buf) = require_history(weights, buffer)? else {
        let cur = calibrated_term(model, current, theta, snapshot, v_tilde)?;
        return Ok(GradientEstimate::combine(weights, cur, None, None));
    };
    let cur_at_theta = model.gradient(current, theta)?;
    let buf_at_theta = model.gradient(buf, theta)?;
    let buf_at_snapshot = model.gradient(buf, snapshot)?;
    let cur = match form {
        CombinedForm::CurrentTask => {
            let cur_at_snapshot = model.gradient(current, snapshot)?;
            ParameterVector::calibrated(&cur_at_theta, &cur_at_snapshot, v_tilde)
        }
        CombinedForm::Literal => {
            ParameterVector::calibrated(&cur_at_theta, &buf_at_snapshot, v_tilde)
        }
    };
    let gamma = ParameterVector::calibrated(&buf_at_theta, &buf_at_snapshot, state.gamma_prime());
    // endpoints select a term outright so the collapses to DGC / ER are exact
    let hist = if alpha == 1.0 {
        gamma
    } else if alpha == 0.0 {
        buf_at_theta
    } else {
        ParameterVector::weighted_sum(alpha, &gamma, 1.0 - alpha, &buf_at_theta)
    };
    Ok(GradientEstimate::combine(
        weights,
        cur,
        Some(hist),
        Some(state.gamma_prime().norm()),
    ))
}

/// Everything a method needs within one stage: snapshot, reference
/// gradients and weights. Built once at the stage start.
#[derive(Debug, Clone)]
pub struct StageContext<'a> {
    pub method: Method,
    pub model: &'a ModelSpec,
    pub state: &'a CalibratorState,
    pub weights: TaskWeights,
    /// `G(𝒯_t, θ̃)`.
    pub v_tilde: Option<ParameterVector>,
    /// `G(ℳ_t, θ̃)` for SSVRG, `G(𝒯_[1:t], θ̃)` for SVRG-joint.
    pub mu_tilde: Option<ParameterVector>,
    pub alpha: f64,
    pub combined_form: CombinedForm,
}

impl<'a> StageContext<'a> {
    /// Computes the reference gradients `method` needs at `state`'s snapshot.
    ///
    /// `current_task` is `𝒯_t`, `buffer_items` the replay memory and `seen`
    /// the union of all training data so far (used only by SVRG-joint).
    #[allow(clippy::too_many_arguments)]
    pub fn prepare(
        method: Method,
        model: &'a ModelSpec,
        state: &'a CalibratorState,
        weights: TaskWeights,
        current_task: &[Sample],
        buffer_items: &[Sample],
        seen: &[Sample],
        alpha: f64,
        combined_form: CombinedForm,
    ) -> Result<Self> {
        let snapshot = state.theta_snapshot();
        let (v_tilde, mu_tilde) = match method {
            Method::Er => (None, None),
            Method::SvrgJoint => (None, Some(svrg_prepare(model, seen, snapshot)?)),
            Method::Ssvrg => {
                let v = svrg_prepare(model, current_task, snapshot)?;
                let mu = if weights.has_history() {
                    Some(svrg_prepare(model, buffer_items, snapshot)?)
                } else {
                    None
                };
                (Some(v), mu)
            }
            Method::Dgc | Method::DgcCombined => {
                (Some(svrg_prepare(model, current_task, snapshot)?), None)
            }
        };
        Ok(StageContext {
            method,
            model,
            state,
            weights,
            v_tilde,
            mu_tilde,
            alpha,
            combined_form,
        })
    }

    /// Step direction at `theta` for the drawn batches. SVRG-joint expects its
    /// batch (drawn from all seen data) in `current` and ignores `buffer`.
    pub fn estimate(
        &self,
        current: &[Sample],
        buffer: Option<&[Sample]>,
        theta: &ParameterVector,
    ) -> Result<GradientEstimate> {
        let missing = || Error::state("stage context was not prepared for this method");
        let snapshot = self.state.theta_snapshot();
        match self.method {
            Method::Er => er_estimate(self.model, current, buffer, theta, self.weights),
            Method::SvrgJoint => {
                let mu = self.mu_tilde.as_ref().ok_or_else(missing)?;
                svrg_estimate(self.model, current, theta, snapshot, mu)
            }
            Method::Ssvrg => ssvrg_estimate(
                self.model,
                current,
                buffer,
                theta,
                snapshot,
                self.v_tilde.as_ref().ok_or_else(missing)?,
                self.mu_tilde.as_ref(),
                self.weights,
            ),
            Method::Dgc => dgc_estimate(
                self.model,
                self.state,
                current,
                buffer,
                theta,
                self.v_tilde.as_ref().ok_or_else(missing)?,
                self.weights,
            ),
            Method::DgcCombined => dgc_combined_estimate(
                self.model,
                self.state,
                current,
                buffer,
                theta,
                self.v_tilde.as_ref().ok_or_else(missing)?,
                self.weights,
                self.alpha,
                self.combined_form,
            ),
        }
    }
}
