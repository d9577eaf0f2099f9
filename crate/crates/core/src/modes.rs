//! Observed sinogram modes and the trajectory-to-mode map.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionGeometry, TrajectoryParams};
use crate::model::Sinogram;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeakConfig {
    /// Minimum topographic prominence as a fraction of the column maximum.
    pub prominence_fraction: f64,
    /// Peaks closer than this many bins are merged into the higher one.
    pub min_separation: usize,
    /// Keep at most this many peaks per column, highest first.
    pub max_peaks: Option<usize>,
    /// Peaks lower than this fraction of the global sinogram maximum are ignored.
    pub min_height_fraction: f64,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self { prominence_fraction: 0.01, min_separation: 3, max_peaks: None, min_height_fraction: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    /// Bin of the local maximum.
    pub detector_index: usize,
    /// Sub-bin refined index, within half a bin of `detector_index`.
    pub fractional_index: f64,
    #[serde(with = "crate::serde_util::vector")]
    pub position: DVector<f64>,
    pub value: f64,
}

/// Detected modes per time index, sorted by detector index within each time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub times: Vec<f64>,
    pub modes: Vec<Vec<Mode>>,
}

impl ModeSet {
    pub fn num_times(&self) -> usize {
        self.modes.len()
    }

    pub fn total(&self) -> usize {
        self.modes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn max_count(&self) -> usize {
        self.modes.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Flat table: one row per mode.
    pub fn to_tsv(&self) -> String {
        let d = self.modes.iter().flatten().next().map_or(0, |m| m.position.len());
        let mut out = String::from("time_index\ttime\tdetector_index\tfractional_index");
        for k in 0..d {
            let _ = write!(out, "\tx{k}");
        }
        out.push_str("\tvalue\n");
        for (m_t, (t, modes)) in self.times.iter().zip(&self.modes).enumerate() {
            for m in modes {
                let _ = write!(out, "{m_t}\t{t:.17e}\t{}\t{:.17e}", m.detector_index, m.fractional_index);
                for x in m.position.iter() {
                    let _ = write!(out, "\t{x:.17e}");
                }
                let _ = writeln!(out, "\t{:.17e}", m.value);
            }
        }
        out
    }
}

/// Indices of strict interior local maxima passing the prominence,
/// height, separation and count filters, in ascending order.
pub fn find_peaks(column: &[f64], cfg: &PeakConfig, min_height: f64) -> Vec<usize> {
    let n = column.len();
    if n < 3 {
        return Vec::new();
    }
    let cmax = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(cmax > 0.0) {
        return Vec::new();
    }
    let min_prom = cfg.prominence_fraction * cmax;
    let mut candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| column[i] > column[i - 1] && column[i] > column[i + 1])
        .filter(|&i| column[i] >= min_height && column[i] > 0.0)
        .filter(|&i| prominence(column, i) >= min_prom)
        .collect();
    // Highest first; ties toward the lower index.
    candidates.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in candidates {
        if kept.iter().all(|&k| k.abs_diff(i) >= cfg.min_separation.max(1)) {
            kept.push(i);
        }
        if cfg.max_peaks.is_some_and(|m| kept.len() >= m) {
            break;
        }
    }
    kept.sort_unstable();
    kept
}

fn prominence(column: &[f64], i: usize) -> f64 {
    let h = column[i];
    let mut left_min = h;
    for &v in column[..i].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &column[i + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Vertex offset of the parabola through the log-values around bin `i`,
/// clamped to half a bin.
pub fn parabolic_offset(column: &[f64], i: usize) -> f64 {
    let (a, b, c) = (column[i - 1], column[i], column[i + 1]);
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return 0.0;
    }
    let (la, lb, lc) = (a.ln(), b.ln(), c.ln());
    let denom = la - 2.0 * lb + lc;
    if !(denom < 0.0) {
        return 0.0;
    }
    (0.5 * (la - lc) / denom).clamp(-0.5, 0.5)
}

pub fn detect_modes(g: &Sinogram, cfg: &PeakConfig) -> ModeSet {
    let geom = g.geometry();
    let min_height = cfg.min_height_fraction * g.max_value().max(0.0);
    let modes = (0..g.num_times())
        .into_par_iter()
        .map(|m_t| {
            let column = g.column(m_t);
            find_peaks(column, cfg, min_height)
                .into_iter()
                .map(|i| {
                    let fractional_index = i as f64 + parabolic_offset(column, i);
                    Mode {
                        detector_index: i,
                        fractional_index,
                        position: geom.detector_position_at(fractional_index),
                        value: column[i],
                    }
                })
                .collect()
        })
        .collect();
    ModeSet { times: geom.times(), modes }
}

/// Point where the ray from the source through `C(t)` meets the detector hyperplane.
///
/// Depends on the trajectory only.
pub fn mode_map(eta: &TrajectoryParams, t: f64, geom: &AcquisitionGeometry) -> Result<DVector<f64>> {
    Ok(project_center(&eta.at(t), geom)?.0)
}

/// Mode position and its Jacobian with respect to the center `C`.
pub fn project_center(c: &DVector<f64>, geom: &AcquisitionGeometry) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s = &geom.source;
    if c.len() != s.len() {
        return Err(Error::DimensionMismatch(format!("center has dimension {}, geometry {}", c.len(), s.len())));
    }
    let k = geom.fixed_component_index;
    let denom = s[k] - c[k];
    if !(denom.abs() >= 1e-12) {
        return Err(Error::DegenerateGeometry(format!(
            "particle level with the source in coordinate {k} (offset {denom:e})"
        )));
    }
    let lambda = (geom.detector_plane() - s[k]) / denom;
    let sc = s - c;
    let r = s + &sc * lambda;
    // d r / d C = -lambda I + (lambda / denom) (s - C) e_k^T
    let mut jac = DMatrix::identity(s.len(), s.len()) * -lambda;
    for i in 0..s.len() {
        jac[(i, k)] += lambda / denom * sc[i];
    }
    Ok((r, jac))
}

/// Mode position and its Jacobian with respect to the velocity.
pub fn mode_map_velocity_jacobian(
    eta: &TrajectoryParams,
    t: f64,
    geom: &AcquisitionGeometry,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (r, jac) = project_center(&eta.at(t), geom)?;
    Ok((r, jac * t))
}

/// An observed mode assigned to one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub position: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSettings {
    pub max_iter: usize,
    /// Relative step size below which the iteration is considered converged.
    pub step_tol: f64,
    /// Root-mean-square residual above which the result is flagged.
    pub residual_warning: Option<f64>,
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self { max_iter: 50, step_tol: 1e-12, residual_warning: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub eta: TrajectoryParams,
    pub initial_residual: f64,
    /// Root-mean-square distance between predicted and assigned modes.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warning: bool,
}

fn residuals(
    eta: &TrajectoryParams,
    obs: &[Observation],
    geom: &AcquisitionGeometry,
    with_jacobian: bool,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = eta.dim();
    let mut res = DVector::zeros(obs.len() * d);
    let mut jac = DMatrix::zeros(if with_jacobian { obs.len() * d } else { 0 }, d);
    for (i, o) in obs.iter().enumerate() {
        let (r, j) = mode_map_velocity_jacobian(eta, o.time, geom)?;
        res.rows_mut(i * d, d).copy_from(&(r - &o.position));
        if with_jacobian {
            jac.view_mut((i * d, 0), (d, d)).copy_from(&j);
        }
    }
    Ok((res, jac))
}

fn rms(res: &DVector<f64>, n_obs: usize) -> f64 {
    (res.norm_squared() / n_obs.max(1) as f64).sqrt()
}

/// Gauss–Newton on the velocity so that predicted modes match the assigned
/// observations in the least-squares sense. Position and acceleration are held fixed.
pub fn newton_refine(
    eta_init: &TrajectoryParams,
    obs: &[Observation],
    geom: &AcquisitionGeometry,
    settings: &RefineSettings,
) -> Result<RefineResult> {
    if obs.is_empty() {
        return Err(Error::NoObservations);
    }
    let (res0, _) = residuals(eta_init, obs, geom, false)?;
    let initial = res0.norm_squared();
    let mut eta = eta_init.clone();
    let mut cost = initial;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        let (res, jac) = residuals(&eta, obs, geom, true)?;
        if res.norm_squared() == 0.0 {
            converged = true;
            break;
        }
        let step = jac.clone().svd(true, true).solve(&(-&res), 1e-14).map_err(|e| Error::NonFinite(e.into()))?;
        iterations += 1;
        // Halve the step until the residual does not grow.
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = eta.clone();
            trial.velocity += &step * scale;
            if let Ok((r, _)) = residuals(&trial, obs, geom, false) {
                let c = r.norm_squared();
                if c <= cost {
                    accepted = Some((trial, c));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, c)) = accepted else {
            converged = true;
            break;
        };
        let small = step.norm() * scale <= settings.step_tol * (1.0 + eta.velocity.norm());
        eta = trial;
        cost = c;
        if small || c == 0.0 {
            converged = true;
            break;
        }
    }
    let residual = (cost / obs.len() as f64).sqrt();
    let warning = !converged || settings.residual_warning.is_some_and(|w| residual > w);
    if !converged {
        return Ok(RefineResult {
            eta: eta_init.clone(),
            initial_residual: rms(&res0, obs.len()),
            residual: rms(&res0, obs.len()),
            iterations,
            converged,
            warning,
        });
    }
    Ok(RefineResult { eta, initial_residual: rms(&res0, obs.len()), residual, iterations, converged, warning })
}
