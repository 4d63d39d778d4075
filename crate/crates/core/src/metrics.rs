//! Continual-learning evaluation metrics.
//!
//! `a[k][j]` is the accuracy on the test split of task `j` after training on
//! task `k` (both 1-based in the public API, `j ≤ k`).

use serde::Serialize;

use crate::calib::Method;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Lower-triangular accuracy grid, filled one row per finished task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    /// Builds a complete matrix from explicit rows (`rows[k]` has `k + 1` entries).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next finished task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let k = self.rows.len() + 1;
        if k > self.tasks {
            return Err(Error::state(format!(
                "matrix already holds all {} rows",
                self.tasks
            )));
        }
        if row.len() != k {
            return Err(Error::state(format!(
                "row {k} must have {k} entries, got {}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn completed_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `a_{k,j}`, 1-based.
    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        self.rows
            .get(k.checked_sub(1)?)?
            .get(j.checked_sub(1)?)
            .copied()
    }

    fn require_complete(&self) -> Result<()> {
        if !self.is_complete() || self.tasks == 0 {
            return Err(Error::state(format!(
                "accuracy matrix has {} of {} rows",
                self.rows.len(),
                self.tasks
            )));
        }
        Ok(())
    }
}

/// Average accuracy after task `i`: `AA_i = (1/i) Σ_{j ≤ i} a_{i,j}`.
pub fn aa(matrix: &AccuracyMatrix, i: usize) -> Result<f64> {
    if i == 0 || i > matrix.tasks {
        return Err(Error::domain(format!(
            "task index {i} outside 1..={}",
            matrix.tasks
        )));
    }
    let row = matrix
        .rows
        .get(i - 1)
        .ok_or_else(|| Error::state(format!("row {i} is not complete")))?;
    Ok(row.iter().sum::<f64>() / i as f64)
}

/// `AA_1, …, AA_k` over the completed rows.
pub fn aa_series(matrix: &AccuracyMatrix) -> Vec<f64> {
    (1..=matrix.completed_rows())
        .map(|i| aa(matrix, i).expect("completed row"))
        .collect()
}

/// Final average incremental accuracy: mean of `AA_1..AA_T`.
pub fn faia(matrix: &AccuracyMatrix) -> Result<f64> {
    matrix.require_complete()?;
    Ok(aa_series(matrix).iter().sum::<f64>() / matrix.tasks as f64)
}

/// Final average accuracy `AA_T`.
pub fn faa(matrix: &AccuracyMatrix) -> Result<f64> {
    matrix.require_complete()?;
    aa(matrix, matrix.tasks)
}

/// Final forgetting: `(1/(T−1)) Σ_{j<T} (max_{j ≤ k < T} a_{k,j} − a_{T,j})`.
pub fn ff(matrix: &AccuracyMatrix) -> Result<f64> {
    matrix.require_complete()?;
    let t = matrix.tasks;
    if t < 2 {
        return Err(Error::domain("forgetting is undefined for a single task"));
    }
    let last = &matrix.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|j| {
            let best = (j..t - 1)
                .map(|k| matrix.rows[k][j])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

/// Ordered `(step, loss on all training data seen so far)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossTrajectory {
    points: Vec<(u64, f64)>,
}

impl LossTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<(u64, f64)>) -> Result<Self> {
        let mut t = Self::new();
        for (s, l) in points {
            t.push(s, l)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, step: u64, loss: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if step <= last {
                return Err(Error::state(format!(
                    "trajectory steps must increase ({step} after {last})"
                )));
            }
        }
        self.points.push((step, loss));
        Ok(())
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothnessStats {
    pub mean_abs_increment: f64,
    /// Population standard deviation of the increments.
    pub std_increment: f64,
    /// Largest upward jump between consecutive points (0 if the loss never rises).
    pub max_spike: f64,
}

/// Statistics of consecutive loss differences.
pub fn smoothness_stats(trajectory: &LossTrajectory) -> Result<SmoothnessStats> {
    let pts = trajectory.points();
    if pts.len() < 2 {
        return Err(Error::domain(
            "smoothness statistics need at least two points",
        ));
    }
    let inc: Vec<f64> = pts.windows(2).map(|w| w[1].1 - w[0].1).collect();
    let n = inc.len() as f64;
    let mean = inc.iter().sum::<f64>() / n;
    let var = inc.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok(SmoothnessStats {
        mean_abs_increment: inc.iter().map(|d| d.abs()).sum::<f64>() / n,
        std_increment: var.sqrt(),
        max_spike: inc.iter().copied().fold(0.0, f64::max),
    })
}

/// Memory accounting in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FootprintReport {
    pub buffer_bytes: u64,
    pub calibrator_bytes: u64,
    pub model_bytes: u64,
    pub total_bytes: u64,
}

/// Default stored size of one sample: `d` features plus the label, 8 bytes each.
pub fn default_sample_bytes(dim: usize) -> u64 {
    dim as u64 * 8 + 8
}

/// Memory footprint of a method holding `buffer_items` replay samples.
///
/// Calibrated methods keep two extra parameter-sized vectors (the calibration
/// term and the snapshot parameter).
pub fn footprint(
    method: Method,
    buffer_items: usize,
    model: &ModelSpec,
    sample_bytes: u64,
) -> FootprintReport {
    let p = model.param_dim() as u64;
    let calibrator_bytes = if method.uses_calibration() {
        2 * p * 8
    } else {
        0
    };
    let buffer_bytes = buffer_items as u64 * sample_bytes;
    let model_bytes = p * 8;
    FootprintReport {
        buffer_bytes,
        calibrator_bytes,
        model_bytes,
        total_bytes: buffer_bytes + calibrator_bytes + model_bytes,
    }
}

/// Buffer capacity that gives a calibration-free method the same footprint as
/// a calibrated method with `capacity`: `capacity + ⌈2·p·8 / sample_bytes⌉`.
pub fn equal_footprint_capacity(capacity: usize, model: &ModelSpec, sample_bytes: u64) -> usize {
    let extra = 2 * model.param_dim() as u64 * 8;
    capacity + extra.div_ceil(sample_bytes) as usize
}

/// Mean and standard error (`s / √n`, sample std) of `values`.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.5, 1.0]]).unwrap()
    }

    fn ones(t: usize) -> AccuracyMatrix {
        AccuracyMatrix::from_rows((1..=t).map(|k| vec![1.0; k]).collect()).unwrap()
    }

    #[test]
    fn hand_matrix_values() {
        let m = hand();
        assert_eq!(aa(&m, 1).unwrap(), 1.0);
        assert_eq!(aa(&m, 2).unwrap(), 0.75);
        assert_eq!(faia(&m).unwrap(), 0.875);
        assert_eq!(faa(&m).unwrap(), 0.75);
        assert_eq!(ff(&m).unwrap(), 0.5);
    }

    #[test]
    fn all_ones() {
        let m = ones(4);
        for i in 1..=4 {
            assert_eq!(aa(&m, i).unwrap(), 1.0);
        }
        assert_eq!(faia(&m).unwrap(), 1.0);
        assert_eq!(faa(&m).unwrap(), 1.0);
        assert_eq!(ff(&m).unwrap(), 0.0);
    }

    #[test]
    fn single_task() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.625]]).unwrap();
        assert_eq!(aa(&m, 1).unwrap(), 0.625);
        assert_eq!(faia(&m).unwrap(), 0.625);
        assert_eq!(faa(&m).unwrap(), 0.625);
        assert!(matches!(ff(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn incomplete_matrix_is_state_error() {
        let mut m = AccuracyMatrix::new(3);
        m.push_row(vec![0.9]).unwrap();
        assert!(aa(&m, 1).is_ok());
        assert!(matches!(aa(&m, 2), Err(Error::State(_))));
        assert!(matches!(faia(&m), Err(Error::State(_))));
        assert!(matches!(faa(&m), Err(Error::State(_))));
        assert!(matches!(ff(&m), Err(Error::State(_))));
        assert!(m.push_row(vec![0.1]).is_err());
        assert!(m.push_row(vec![0.1, 1.5]).is_err());
    }

    #[test]
    fn forgetting_zero_when_final_row_is_best() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.6, 0.7], vec![0.6, 0.7, 0.4]])
            .unwrap();
        assert_eq!(ff(&m).unwrap(), 0.0);
        let c = AccuracyMatrix::from_rows(vec![vec![0.3], vec![0.3, 0.3], vec![0.3, 0.3, 0.3]])
            .unwrap();
        assert_eq!(ff(&c).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_examples() {
        let flat = LossTrajectory::from_points(vec![(0, 2.0), (1, 2.0), (2, 2.0)]).unwrap();
        let s = smoothness_stats(&flat).unwrap();
        assert_eq!(
            (s.mean_abs_increment, s.std_increment, s.max_spike),
            (0.0, 0.0, 0.0)
        );

        let linear =
            LossTrajectory::from_points((0..6).map(|i| (i, 3.0 - 0.25 * i as f64)).collect())
                .unwrap();
        let s = smoothness_stats(&linear).unwrap();
        assert_eq!(s.mean_abs_increment, 0.25);
        assert_eq!(s.std_increment, 0.0);

        let spiky = LossTrajectory::from_points(vec![(0, 1.0), (5, 0.5), (9, 1.5)]).unwrap();
        assert_eq!(smoothness_stats(&spiky).unwrap().max_spike, 1.0);

        let one = LossTrajectory::from_points(vec![(0, 1.0)]).unwrap();
        assert!(matches!(smoothness_stats(&one), Err(Error::Domain(_))));
        assert!(LossTrajectory::from_points(vec![(3, 1.0), (3, 1.0)]).is_err());
    }

    #[test]
    fn footprint_accounting() {
        let model = ModelSpec::softmax(20, 10, 0.0);
        let p = model.param_dim() as u64;
        let sb = default_sample_bytes(20);
        assert_eq!(sb, 168);
        let empty = footprint(Method::Er, 0, &model, sb);
        assert_eq!(empty.total_bytes, empty.model_bytes);
        let er = footprint(Method::Er, 200, &model, sb);
        let dgc = footprint(Method::Dgc, 200, &model, sb);
        assert_eq!(dgc.total_bytes - er.total_bytes, 2 * p * 8);
        assert_eq!(dgc.calibrator_bytes, 2 * p * 8);
        assert_eq!(er.calibrator_bytes, 0);
        // 2 * 210 * 8 = 3360 bytes = 20 samples of 168 bytes
        assert_eq!(equal_footprint_capacity(200, &model, sb), 220);
        let er_eq = footprint(Method::Er, 220, &model, sb);
        assert!(er_eq.total_bytes >= dgc.total_bytes);
    }

    #[test]
    fn mean_stderr_basic() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..6).prop_flat_map(|t| {
            (1..=t)
                .map(|k| proptest::collection::vec(0.0f64..=1.0, k))
                .collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn faia_is_monotone(rows in matrix_strategy(), k_sel in 0usize..100, j_sel in 0usize..100, bump in 0.0f64..1.0) {
            let base = AccuracyMatrix::from_rows(rows.clone()).unwrap();
            let k = k_sel % rows.len();
            let j = j_sel % (k + 1);
            let mut raised = rows.clone();
            raised[k][j] = (raised[k][j] + bump).min(1.0);
            let raised = AccuracyMatrix::from_rows(raised).unwrap();
            prop_assert!(faia(&raised).unwrap() >= faia(&base).unwrap() - 1e-15);
        }

        #[test]
        fn forgetting_invariant_under_column_shift(rows in matrix_strategy(), j_sel in 0usize..100, shift in -0.2f64..0.2) {
            let t = rows.len();
            let j = j_sel % (t - 1);
            // keep shifted entries inside [0, 1]
            let lo = (j..t).map(|k| rows[k][j]).fold(f64::INFINITY, f64::min);
            let hi = (j..t).map(|k| rows[k][j]).fold(f64::NEG_INFINITY, f64::max);
            let shift = shift.clamp(-lo, 1.0 - hi);
            let mut shifted = rows.clone();
            for row in shifted.iter_mut().skip(j) {
                row[j] += shift;
            }
            let a = ff(&AccuracyMatrix::from_rows(rows).unwrap()).unwrap();
            let b = ff(&AccuracyMatrix::from_rows(shifted).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn metrics_ignore_nothing_but_the_matrix(rows in matrix_strategy()) {
            let m1 = AccuracyMatrix::from_rows(rows.clone()).unwrap();
            let m2 = AccuracyMatrix::from_rows(rows).unwrap();
            prop_assert_eq!(faia(&m1).unwrap(), faia(&m2).unwrap());
            prop_assert_eq!(ff(&m1).unwrap(), ff(&m2).unwrap());
        }
    }
}
