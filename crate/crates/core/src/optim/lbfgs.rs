//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self { memory: 10, max_iter: 500, grad_tol: 1e-8, c1: 1e-4, c2: 0.9, max_line_search: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinimizeStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub f: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: MinimizeStatus,
    pub evaluations: usize,
    pub trace: Vec<TraceEntry>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Counter<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Counter<F> {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.evals += 1;
        (self.f)(x)
    }
}

#[derive(Clone)]
struct Point {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    x: Vec<f64>,
    slope: f64,
}

/// Minimizes a smooth objective returning `(f, grad)`.
///
/// Non-finite values away from `x0` are treated as failed trial steps and the
/// line search backs off. A non-finite value at `x0` is an error.
pub fn minimize<F>(objective: F, x0: &[f64], settings: &LbfgsSettings) -> Result<MinimizeResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut obj = Counter { f: objective, evals: 0 };
    let n = x0.len();
    let (mut f, mut g) = obj.eval(x0);
    if !f.is_finite() || g.len() != n || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    let mut x = x0.to_vec();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(settings.memory);
    let mut trace = vec![TraceEntry { iteration: 0, f, grad_norm: norm(&g) }];
    let mut status = MinimizeStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        let gnorm = norm(&g);
        if gnorm < settings.grad_tol {
            status = MinimizeStatus::Converged;
            break;
        }
        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) || !slope.is_finite() {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let alpha0 = if history.is_empty() { 1.0 / gnorm.max(1.0) } else { 1.0 };

        let Some(step) = line_search(&mut obj, &x, f, &g, &dir, slope, alpha0, settings) else {
            // Stale curvature pairs can produce a poor direction; retry once
            // from steepest descent before giving up.
            if !history.is_empty() {
                history.clear();
                continue;
            }
            status = MinimizeStatus::LineSearchFailure;
            break;
        };
        iterations += 1;

        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = step.x;
        f = step.f;
        g = step.g;
        trace.push(TraceEntry { iteration: iterations, f, grad_norm: norm(&g) });
    }
    if status == MinimizeStatus::MaxIterations && norm(&g) < settings.grad_tol {
        status = MinimizeStatus::Converged;
    }
    Ok(MinimizeResult {
        grad_norm: norm(&g),
        x,
        f,
        iterations,
        status,
        evaluations: obj.evals,
        trace,
    })
}

/// `-H g` from the stored curvature pairs.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn probe<F>(obj: &mut Counter<F>, x: &[f64], dir: &[f64], alpha: f64) -> Point
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let xn: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
    let (f, g) = obj.eval(&xn);
    let finite = f.is_finite() && g.iter().all(|v| v.is_finite());
    let slope = if finite { dot(&g, dir) } else { f64::NAN };
    Point { alpha, f: if finite { f } else { f64::INFINITY }, g, x: xn, slope }
}

/// Minimizer of the cubic interpolating two points with slopes, or `None`.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    obj: &mut Counter<F>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    dir: &[f64],
    slope0: f64,
    alpha0: f64,
    settings: &LbfgsSettings,
) -> Option<Point>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    // Near a minimizer the decrease drops below rounding in `f`; fall back to
    // the approximate Wolfe test, which relies on the slope instead.
    let noise = 16.0 * f64::EPSILON * f0.abs();
    let armijo = |p: &Point| {
        p.f <= f0 + settings.c1 * p.alpha * slope0
            || (p.f <= f0 + noise && p.slope <= (2.0 * settings.c1 - 1.0) * slope0)
    };
    let curvature = |p: &Point| p.slope.abs() <= -settings.c2 * slope0;

    let mut prev = Point { alpha: 0.0, f: f0, g: g0.to_vec(), x: x.to_vec(), slope: slope0 };
    let mut best: Option<Point> = None;
    let mut alpha = alpha0;
    let mut evals = 0;

    // Bracketing phase.
    let (mut lo, mut hi) = loop {
        if evals >= settings.max_line_search {
            return best;
        }
        let cur = probe(obj, x, dir, alpha);
        evals += 1;
        if !cur.f.is_finite() {
            break (prev, cur);
        }
        if !armijo(&cur) || (evals > 1 && cur.f >= prev.f) {
            break (prev, cur);
        }
        if curvature(&cur) {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            break (cur, prev);
        }
        alpha = cur.alpha * 2.0;
        best = Some(cur.clone());
        prev = cur;
    };

    // Zoom phase: `lo` satisfies sufficient decrease, `hi` brackets.
    while evals < settings.max_line_search {
        let (a_lo, a_hi) = (lo.alpha, hi.alpha);
        let width = (a_hi - a_lo).abs();
        if width <= 1e-16 * a_lo.abs().max(a_hi.abs()).max(1e-300) {
            break;
        }
        let (left, right) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
        let guard = 0.1 * width;
        let mut trial = if hi.f.is_finite() && hi.slope.is_finite() {
            cubic_min(lo.alpha, lo.f, lo.slope, hi.alpha, hi.f, hi.slope).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        if !(trial > left + guard && trial < right - guard) {
            trial = 0.5 * (a_lo + a_hi);
        }
        let cur = probe(obj, x, dir, trial);
        evals += 1;
        if !cur.f.is_finite() || !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // Fall back to the best sufficient-decrease point, if any was found.
    if lo.alpha > 0.0 && lo.f < f0 {
        Some(lo)
    } else {
        best.filter(|b| b.f < f0)
    }
}
