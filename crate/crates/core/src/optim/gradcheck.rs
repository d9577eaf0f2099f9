//! Central-difference gradient verification.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Per-component relative discrepancy.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

/// Compares the analytic gradient of `f` at `x` with central differences of
/// step `rel_step * max(|x_i|, 1)`.
///
/// The relative error of a component is `max(|a - n| - noise, 0) / max(|a|, |n|, floor)`.
/// `noise = 16 eps max|f(x +- h)| / (2h)` bounds the rounding error of the
/// difference quotient, and the floor is `1e-8` times the largest numeric
/// component, so that entries which are zero up to rounding do not dominate.
pub fn check_gradient<F>(mut f: F, x: &[f64], rel_step: f64) -> GradientCheck
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    let mut xp = x.to_vec();
    let (numeric, noise): (Vec<f64>, Vec<f64>) = (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            let (hi, lo) = (x[i] + h, x[i] - h);
            xp[i] = hi;
            let fp = f(&xp).0;
            xp[i] = lo;
            let fm = f(&xp).0;
            xp[i] = x[i];
            // Divide by the representable step, not the requested one.
            let step = hi - lo;
            ((fp - fm) / step, 16.0 * f64::EPSILON * fp.abs().max(fm.abs()) / step)
        })
        .unzip();
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-8 * scale).max(f64::MIN_POSITIVE);
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .zip(&noise)
        .map(|((a, n), e)| ((a - n).abs() - e).max(0.0) / a.abs().max(n.abs()).max(floor))
        .collect();
    let (worst_index, max_rel_error) = rel_errors
        .iter()
        .enumerate()
        .fold((None, 0.0), |(wi, wm), (i, &e)| if e > wm || e.is_nan() { (Some(i), e) } else { (wi, wm) });
    GradientCheck { analytic, numeric, rel_errors, max_rel_error, worst_index }
}
