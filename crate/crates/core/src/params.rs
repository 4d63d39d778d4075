use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat model parameter vector. All calibration state shares its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    /// Wraps `values`, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite parameter at index {i}")));
        }
        Ok(ParameterVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ParameterVector(vec![0.0; dim])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        ParameterVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance_sq(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &Self) -> Self {
        ParameterVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + other`, elementwise.
    pub fn add(&self, other: &Self) -> Self {
        ParameterVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, factor: f64) -> Self {
        ParameterVector(self.0.iter().map(|a| a * factor).collect())
    }

    /// In-place `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    /// `wa * a + wb * b`, elementwise.
    pub fn weighted_sum(wa: f64, a: &Self, wb: f64, b: &Self) -> Self {
        ParameterVector(a.0.iter().zip(&b.0).map(|(x, y)| wa * x + wb * y).collect())
    }

    /// SVRG-style calibration `at_theta - (at_snapshot - reference)`, evaluated
    /// as `(at_theta - at_snapshot) + reference`.
    ///
    /// The evaluation order makes the result bit-identical to `reference`
    /// whenever `at_theta == at_snapshot`. Every calibrated estimator goes
    /// through this so that estimates that must coincide exactly (e.g. the
    /// first task of DGC and plain SVRG) are rounded identically.
    pub fn calibrated(at_theta: &Self, at_snapshot: &Self, reference: &Self) -> Self {
        ParameterVector(
            at_theta
                .0
                .iter()
                .zip(&at_snapshot.0)
                .zip(&reference.0)
                .map(|((g, s), r)| (g - s) + r)
                .collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for ParameterVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(p: ParameterVector) -> Self {
        p.0
    }
}
