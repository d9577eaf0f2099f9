//! Non-negative least squares (Lawson–Hanson active set).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub residual_norm: f64,
    /// The design matrix is numerically rank deficient. The solution is then a
    /// minimizer but not necessarily the unique one.
    pub rank_deficient: bool,
    pub iterations: usize,
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let tol = svd.singular_values.max() * a.nrows().max(a.ncols()) as f64 * f64::EPSILON;
    svd.solve(b, tol).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

fn numeric_rank(a: &DMatrix<f64>) -> usize {
    let s = a.singular_values();
    let tol = s.max() * a.nrows().max(a.ncols()) as f64 * f64::EPSILON;
    s.iter().filter(|&&v| v > tol).count()
}

/// Solves `min ||A x - b||` subject to `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<NnlsSolution> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::DimensionMismatch(format!("A has {m} rows, b has {}", b.len())));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("NNLS inputs".into()));
    }
    let rank_deficient = n > 0 && numeric_rank(a) < n;
    let scale = a.abs().max() * b.abs().max().max(1.0) * (m.max(1) as f64);
    let tol = (1e3 * f64::EPSILON * scale).max(1e-14);

    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let mut iterations = 0;
    let max_outer = 3 * n.max(1) + 10;

    // An index that re-entered and was immediately dropped is skipped once,
    // which breaks the classic degenerate cycle.
    let mut skip: Option<usize> = None;
    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        // Entering index: the largest positive dual among the active set.
        let mut enter = None;
        let mut best = tol;
        for j in 0..n {
            if !passive[j] && w[j] > best && skip != Some(j) {
                best = w[j];
                enter = Some(j);
            }
        }
        let Some(t) = enter else { break };
        passive[t] = true;
        skip = None;

        loop {
            iterations += 1;
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let ap = a.select_columns(&idx);
            let sp = lstsq(&ap, b);
            if sp.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = sp[k];
                }
                break;
            }
            // Step from x toward s until the first passive variable hits zero.
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if sp[k] <= 0.0 {
                    let denom = x[j] - sp[k];
                    let ratio = if denom > 0.0 { x[j] / denom } else { 0.0 };
                    alpha = alpha.min(ratio);
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (sp[k] - x[j]);
            }
            let mut dropped = false;
            for &j in &idx {
                if x[j] <= tol * 1e-3 {
                    x[j] = 0.0;
                    passive[j] = false;
                    dropped = true;
                }
            }
            if !passive[t] && alpha == 0.0 {
                skip = Some(t);
            }
            if !dropped || passive.iter().all(|p| !p) {
                break;
            }
        }
    }
    let residual_norm = (b - a * &x).norm();
    Ok(NnlsSolution { x, residual_norm, rank_deficient, iterations })
}
