//! Differentiable models with exact analytic gradients.
//!
//! Three kinds are supported:
//!
//! * `ridge-quadratic`: `½(θᵀx − y)² + (λ/2)‖θ‖²`, with the label used as a
//!   real regression target. Strongly convex for `λ > 0`, so its smoothness and
//!   strong-convexity constants are available in closed form.
//! * `softmax-linear`: multinomial logistic regression with per-class bias.
//! * `mlp-1hidden`: one tanh hidden layer followed by a softmax output.
//!
//! Classifier labels are 1-based (`1..=K`). The L2 term is part of the loss, so
//! the optimiser only ever sees `∇ℓ`.

use std::ops::Deref;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: u32,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: u32) -> Self {
        Sample { features, label }
    }
}

/// A non-empty batch with homogeneous feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch(Vec<Sample>);

impl LabeledBatch {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::config("batch must contain at least one sample"));
        };
        let d = first.features.len();
        if samples.iter().any(|s| s.features.len() != d) {
            return Err(Error::config("batch mixes feature dimensions"));
        }
        Ok(LabeledBatch(samples))
    }

    pub fn into_inner(self) -> Vec<Sample> {
        self.0
    }
}

impl Deref for LabeledBatch {
    type Target = [Sample];

    fn deref(&self) -> &[Sample] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    RidgeQuadratic,
    SoftmaxLinear,
    #[serde(rename = "mlp-1hidden")]
    Mlp1Hidden,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::RidgeQuadratic => "ridge-quadratic",
            ModelKind::SoftmaxLinear => "softmax-linear",
            ModelKind::Mlp1Hidden => "mlp-1hidden",
        }
    }

    pub fn is_classifier(self) -> bool {
        !matches!(self, ModelKind::RidgeQuadratic)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge-quadratic" => Ok(ModelKind::RidgeQuadratic),
            "softmax-linear" => Ok(ModelKind::SoftmaxLinear),
            "mlp-1hidden" => Ok(ModelKind::Mlp1Hidden),
            other => Err(Error::config(format!(
                "unknown model kind `{other}` (expected ridge-quadratic, softmax-linear or mlp-1hidden)"
            ))),
        }
    }
}

/// Model family plus the shapes that fix its parameter dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub class_count: usize,
    #[serde(default)]
    pub hidden_width: usize,
    #[serde(default)]
    pub l2: f64,
}

/// Smoothness `L` and strong convexity `γ` of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvexityParams {
    pub smoothness: f64,
    pub strong_convexity: f64,
    /// `true` when `smoothness` is a sampled lower bound rather than exact.
    pub estimated: bool,
}

impl ConvexityParams {
    pub fn condition_number(&self) -> f64 {
        self.smoothness / self.strong_convexity
    }
}

impl ModelSpec {
    pub fn ridge(input_dim: usize, l2: f64) -> Self {
        ModelSpec {
            kind: ModelKind::RidgeQuadratic,
            input_dim,
            class_count: 1,
            hidden_width: 0,
            l2,
        }
    }

    pub fn softmax(input_dim: usize, class_count: usize, l2: f64) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxLinear,
            input_dim,
            class_count,
            hidden_width: 0,
            l2,
        }
    }

    pub fn mlp(input_dim: usize, hidden_width: usize, class_count: usize, l2: f64) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp1Hidden,
            input_dim,
            class_count,
            hidden_width,
            l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config(format!(
                "l2 coefficient must be >= 0, got {}",
                self.l2
            )));
        }
        if self.kind.is_classifier() && self.class_count < 2 {
            return Err(Error::config("classifiers need at least two classes"));
        }
        if self.kind == ModelKind::Mlp1Hidden && self.hidden_width == 0 {
            return Err(Error::config("mlp-1hidden needs hidden_width >= 1"));
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn param_dim(&self) -> usize {
        let (d, k, h) = (self.input_dim, self.class_count, self.hidden_width);
        match self.kind {
            ModelKind::RidgeQuadratic => d,
            ModelKind::SoftmaxLinear => k * (d + 1),
            ModelKind::Mlp1Hidden => h * (d + 1) + k * (h + 1),
        }
    }

    /// Starting parameters: zeros for the convex models, small Gaussian
    /// weights for the MLP (zero is a stationary point of a tanh network).
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector {
        match self.kind {
            ModelKind::RidgeQuadratic | ModelKind::SoftmaxLinear => {
                ParameterVector::zeros(self.param_dim())
            }
            ModelKind::Mlp1Hidden => {
                let (d, h) = (self.input_dim, self.hidden_width);
                let mut values = vec![0.0; self.param_dim()];
                let w1_scale = 1.0 / (d as f64).sqrt();
                let w2_scale = 1.0 / (h as f64).sqrt();
                let w2_start = h * (d + 1);
                for (i, v) in values.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    if i < h * d {
                        *v = z * w1_scale;
                    } else if i >= w2_start && i < w2_start + self.class_count * h {
                        *v = z * w2_scale;
                    }
                }
                ParameterVector::from_vec_unchecked(values)
            }
        }
    }

    fn check_theta(&self, theta: &ParameterVector) -> Result<()> {
        if theta.dim() != self.param_dim() {
            return Err(Error::config(format!(
                "parameter dimension {} does not match model dimension {}",
                theta.dim(),
                self.param_dim()
            )));
        }
        Ok(())
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.features.len() != self.input_dim {
            return Err(Error::config(format!(
                "sample has {} features, model expects {}",
                s.features.len(),
                self.input_dim
            )));
        }
        if self.kind.is_classifier() && !(1..=self.class_count as u32).contains(&s.label) {
            return Err(Error::config(format!(
                "label {} outside 1..={}",
                s.label, self.class_count
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[Sample], theta: &ParameterVector) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        self.check_theta(theta)?;
        batch.iter().try_for_each(|s| self.check_sample(s))
    }

    /// Mean per-sample loss over `batch` (L2 term included).
    pub fn loss(&self, batch: &[Sample], theta: &ParameterVector) -> Result<f64> {
        self.check_batch(batch, theta)?;
        let total: f64 = batch.iter().map(|s| self.sample_data_loss(s, theta)).sum();
        Ok(total / batch.len() as f64 + 0.5 * self.l2 * theta.norm_sq())
    }

    /// Mean per-sample analytic gradient over `batch`.
    pub fn gradient(&self, batch: &[Sample], theta: &ParameterVector) -> Result<ParameterVector> {
        self.check_batch(batch, theta)?;
        let mut acc = vec![0.0; theta.dim()];
        for s in batch {
            self.accumulate_data_gradient(s, theta, &mut acc);
        }
        let inv_n = 1.0 / batch.len() as f64;
        for (a, t) in acc.iter_mut().zip(theta.iter()) {
            *a = *a * inv_n + self.l2 * t;
        }
        Ok(ParameterVector::from_vec_unchecked(acc))
    }

    /// Full-dataset gradient `G(P, θ) = (1/n) Σ ∇ℓ(xⁱ, yⁱ, θ)`.
    pub fn full_gradient(
        &self,
        dataset: &[Sample],
        theta: &ParameterVector,
    ) -> Result<ParameterVector> {
        if dataset.is_empty() {
            return Err(Error::domain(
                "full gradient is undefined on an empty dataset",
            ));
        }
        self.gradient(dataset, theta)
    }

    /// Central-difference approximation of [`ModelSpec::gradient`]. Test oracle.
    pub fn finite_diff_gradient(
        &self,
        batch: &[Sample],
        theta: &ParameterVector,
        step: f64,
    ) -> Result<ParameterVector> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::config(format!(
                "finite-difference step must be > 0, got {step}"
            )));
        }
        self.check_batch(batch, theta)?;
        let mut probe = theta.clone();
        let mut out = Vec::with_capacity(theta.dim());
        for i in 0..theta.dim() {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = self.loss(batch, &probe)?;
            probe[i] = orig - step;
            let down = self.loss(batch, &probe)?;
            probe[i] = orig;
            out.push((up - down) / (2.0 * step));
        }
        Ok(ParameterVector::from_vec_unchecked(out))
    }

    /// Per-class scores. Ridge models score class `c` by `−(θᵀx − c)²`, so the
    /// prediction is the class nearest to the regression output.
    pub fn class_scores(&self, x: &[f64], theta: &ParameterVector) -> Vec<f64> {
        match self.kind {
            ModelKind::RidgeQuadratic => {
                let y_hat = dot(theta, x);
                (1..=self.class_count)
                    .map(|c| -(y_hat - c as f64).powi(2))
                    .collect()
            }
            ModelKind::SoftmaxLinear => self.linear_scores(x, theta),
            ModelKind::Mlp1Hidden => self.mlp_forward(x, theta).1,
        }
    }

    /// Predicted 1-based label; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64], theta: &ParameterVector) -> u32 {
        let scores = self.class_scores(x, theta);
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = k;
            }
        }
        best as u32 + 1
    }

    /// Fraction of `dataset` whose predicted label equals the true label.
    pub fn predict_accuracy(&self, dataset: &[Sample], theta: &ParameterVector) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::domain("accuracy is undefined on an empty dataset"));
        }
        self.check_theta(theta)?;
        let mut correct = 0usize;
        for s in dataset {
            if s.features.len() != self.input_dim {
                return Err(Error::config("sample dimension does not match model"));
            }
            if self.predict(&s.features, theta) == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// Smoothness and strong-convexity constants of the loss on `dataset`.
    ///
    /// Ridge models get the exact extreme eigenvalues of `XᵀX/n + λI`.
    /// Classifiers get a sampled estimate of `L` (see [`ModelSpec::smoothness_estimate`])
    /// and `γ = λ`; they are rejected when `λ = 0` since no strong convexity
    /// constant exists then.
    pub fn convexity_params(&self, dataset: &[Sample]) -> Result<ConvexityParams> {
        if dataset.is_empty() {
            return Err(Error::domain(
                "convexity constants need a non-empty dataset",
            ));
        }
        match self.kind {
            ModelKind::RidgeQuadratic => {
                let (lo, hi) = second_moment_extremes(dataset, self.input_dim)?;
                let gamma = lo + self.l2;
                if gamma <= 1e-12 * (hi + self.l2).max(1.0) {
                    return Err(Error::domain(
                        "second-moment matrix is singular and l2 = 0: loss is not strongly convex",
                    ));
                }
                Ok(ConvexityParams {
                    smoothness: hi + self.l2,
                    strong_convexity: gamma,
                    estimated: false,
                })
            }
            _ => {
                if self.l2 <= 0.0 {
                    return Err(Error::domain(
                        "classifier without l2 term has no strong convexity constant",
                    ));
                }
                let mut rng = crate::seed::rng_for(0, crate::seed::Substream::Probe);
                let centre = ParameterVector::zeros(self.param_dim());
                let smoothness = self.smoothness_estimate(dataset, &centre, 1.0, 64, &mut rng)?;
                Ok(ConvexityParams {
                    smoothness: smoothness.max(self.l2),
                    strong_convexity: self.l2,
                    estimated: true,
                })
            }
        }
    }

    /// Empirical smoothness coefficient: the largest observed
    /// `‖∇f(θ₁) − ∇f(θ₂)‖ / ‖θ₁ − θ₂‖` over `pairs` random parameter pairs drawn
    /// from a Gaussian ball of scale `radius` around `centre`.
    pub fn smoothness_estimate<R: Rng + ?Sized>(
        &self,
        dataset: &[Sample],
        centre: &ParameterVector,
        radius: f64,
        pairs: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if pairs == 0 {
            return Err(Error::config("smoothness estimate needs at least one pair"));
        }
        let mut best = 0.0f64;
        for _ in 0..pairs {
            let a = perturb(centre, radius, rng);
            let b = perturb(centre, radius, rng);
            let dist = a.distance_sq(&b).sqrt();
            if dist == 0.0 {
                continue;
            }
            let ga = self.full_gradient(dataset, &a)?;
            let gb = self.full_gradient(dataset, &b)?;
            best = best.max(ga.distance_sq(&gb).sqrt() / dist);
        }
        Ok(best)
    }

    fn sample_data_loss(&self, s: &Sample, theta: &ParameterVector) -> f64 {
        match self.kind {
            ModelKind::RidgeQuadratic => {
                let r = dot(theta, &s.features) - s.label as f64;
                0.5 * r * r
            }
            ModelKind::SoftmaxLinear => {
                cross_entropy(&self.linear_scores(&s.features, theta), s.label)
            }
            ModelKind::Mlp1Hidden => {
                cross_entropy(&self.mlp_forward(&s.features, theta).1, s.label)
            }
        }
    }

    fn accumulate_data_gradient(&self, s: &Sample, theta: &ParameterVector, acc: &mut [f64]) {
        let x = &s.features;
        let d = self.input_dim;
        match self.kind {
            ModelKind::RidgeQuadratic => {
                let r = dot(theta, x) - s.label as f64;
                for (a, xi) in acc.iter_mut().zip(x) {
                    *a += r * xi;
                }
            }
            ModelKind::SoftmaxLinear => {
                let k_count = self.class_count;
                let delta = softmax_residual(self.linear_scores(x, theta), s.label);
                let bias_start = k_count * d;
                for (k, dk) in delta.iter().enumerate() {
                    let row = &mut acc[k * d..(k + 1) * d];
                    for (a, xi) in row.iter_mut().zip(x) {
                        *a += dk * xi;
                    }
                    acc[bias_start + k] += dk;
                }
            }
            ModelKind::Mlp1Hidden => {
                let (h, k_count) = (self.hidden_width, self.class_count);
                let (hidden, scores) = self.mlp_forward(x, theta);
                let delta = softmax_residual(scores, s.label);
                let b1 = h * d;
                let w2 = h * (d + 1);
                let b2 = w2 + k_count * h;
                let mut back = vec![0.0; h];
                for (k, dk) in delta.iter().enumerate() {
                    for j in 0..h {
                        acc[w2 + k * h + j] += dk * hidden[j];
                        back[j] += dk * theta[w2 + k * h + j];
                    }
                    acc[b2 + k] += dk;
                }
                for j in 0..h {
                    let dz = back[j] * (1.0 - hidden[j] * hidden[j]);
                    let row = &mut acc[j * d..(j + 1) * d];
                    for (a, xi) in row.iter_mut().zip(x) {
                        *a += dz * xi;
                    }
                    acc[b1 + j] += dz;
                }
            }
        }
    }

    fn linear_scores(&self, x: &[f64], theta: &ParameterVector) -> Vec<f64> {
        let d = self.input_dim;
        let bias_start = self.class_count * d;
        (0..self.class_count)
            .map(|k| dot(&theta[k * d..(k + 1) * d], x) + theta[bias_start + k])
            .collect()
    }

    /// Hidden activations and output scores.
    fn mlp_forward(&self, x: &[f64], theta: &ParameterVector) -> (Vec<f64>, Vec<f64>) {
        let (d, h, k_count) = (self.input_dim, self.hidden_width, self.class_count);
        let b1 = h * d;
        let w2 = h * (d + 1);
        let b2 = w2 + k_count * h;
        let hidden: Vec<f64> = (0..h)
            .map(|j| (dot(&theta[j * d..(j + 1) * d], x) + theta[b1 + j]).tanh())
            .collect();
        let scores = (0..k_count)
            .map(|k| dot(&theta[w2 + k * h..w2 + (k + 1) * h], &hidden) + theta[b2 + k])
            .collect();
        (hidden, scores)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

fn cross_entropy(scores: &[f64], label: u32) -> f64 {
    log_sum_exp(scores) - scores[label as usize - 1]
}

/// `softmax(scores) − onehot(label)`.
fn softmax_residual(mut scores: Vec<f64>, label: u32) -> Vec<f64> {
    let lse = log_sum_exp(&scores);
    for s in scores.iter_mut() {
        *s = (*s - lse).exp();
    }
    scores[label as usize - 1] -= 1.0;
    scores
}

fn perturb<R: Rng + ?Sized>(centre: &ParameterVector, radius: f64, rng: &mut R) -> ParameterVector {
    let values = centre
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + radius * z
        })
        .collect();
    ParameterVector::from_vec_unchecked(values)
}

/// Smallest and largest eigenvalue of `XᵀX/n`.
fn second_moment_extremes(dataset: &[Sample], d: usize) -> Result<(f64, f64)> {
    let mut m = DMatrix::<f64>::zeros(d, d);
    for s in dataset {
        if s.features.len() != d {
            return Err(Error::config("sample dimension does not match model"));
        }
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += s.features[i] * s.features[j];
            }
        }
    }
    m /= dataset.len() as f64;
    let eig = SymmetricEigen::new(m).eigenvalues;
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo.max(0.0), hi))
}
