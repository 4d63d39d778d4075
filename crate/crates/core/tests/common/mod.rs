//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's numerical code.

#![allow(dead_code, clippy::needless_range_loop)]

use gradcal::{ModelKind, ModelSpec, Sample};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_vec<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-sample loss written straight from the parameter layout.
pub fn sample_loss(model: &ModelSpec, theta: &[f64], s: &Sample) -> f64 {
    let x = &s.features;
    let d = model.input_dim;
    match model.kind {
        ModelKind::RidgeQuadratic => {
            let pred: f64 = (0..d).map(|i| theta[i] * x[i]).sum();
            0.5 * (pred - s.label as f64).powi(2)
        }
        ModelKind::SoftmaxLinear => {
            let k = model.class_count;
            let scores: Vec<f64> = (0..k)
                .map(|c| (0..d).map(|i| theta[c * d + i] * x[i]).sum::<f64>() + theta[k * d + c])
                .collect();
            lse(&scores) - scores[s.label as usize - 1]
        }
        ModelKind::Mlp1Hidden => {
            let (h, k) = (model.hidden_width, model.class_count);
            let hidden: Vec<f64> = (0..h)
                .map(|j| {
                    ((0..d).map(|i| theta[j * d + i] * x[i]).sum::<f64>() + theta[h * d + j]).tanh()
                })
                .collect();
            let w2 = h * (d + 1);
            let scores: Vec<f64> = (0..k)
                .map(|c| {
                    (0..h)
                        .map(|j| theta[w2 + c * h + j] * hidden[j])
                        .sum::<f64>()
                        + theta[w2 + k * h + c]
                })
                .collect();
            lse(&scores) - scores[s.label as usize - 1]
        }
    }
}

pub fn batch_loss(model: &ModelSpec, theta: &[f64], batch: &[Sample]) -> f64 {
    let data: f64 = batch
        .iter()
        .map(|s| sample_loss(model, theta, s))
        .sum::<f64>()
        / batch.len() as f64;
    data + 0.5 * model.l2 * theta.iter().map(|t| t * t).sum::<f64>()
}

/// Central differences of [`batch_loss`].
pub fn numeric_gradient(model: &ModelSpec, theta: &[f64], batch: &[Sample], h: f64) -> Vec<f64> {
    let mut p = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = batch_loss(model, &p, batch);
            p[i] = orig - h;
            let down = batch_loss(model, &p, batch);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Exact ridge gradient `(1/n) Σ (θᵀx − y) x + λθ`.
pub fn ridge_gradient(theta: &[f64], data: &[Sample], l2: f64) -> Vec<f64> {
    let n = data.len() as f64;
    let mut g: Vec<f64> = theta.iter().map(|t| l2 * t).collect();
    for s in data {
        let r: f64 = theta
            .iter()
            .zip(&s.features)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            - s.label as f64;
        for (gi, xi) in g.iter_mut().zip(&s.features) {
            *gi += r * xi / n;
        }
    }
    g
}

/// `XᵀX/n + λI` and `Xᵀy/n`.
pub fn ridge_normal_equations(data: &[Sample], d: usize, l2: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = data.len() as f64;
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for s in data {
        for i in 0..d {
            b[i] += s.features[i] * s.label as f64 / n;
            for j in 0..d {
                a[i][j] += s.features[i] * s.features[j] / n;
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += l2;
    }
    (a, b)
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Mean of per-sample vectors, used as the joint full-gradient oracle.
pub fn mean_vec(vs: &[Vec<f64>]) -> Vec<f64> {
    let n = vs.len() as f64;
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x / n;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
