use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{render_density, support_radius, Scene};
use crate::optim::rectangular_assignment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleMetrics {
    pub truth_index: usize,
    pub estimate_index: usize,
    /// Largest componentwise velocity error.
    pub velocity_error: f64,
    /// Largest componentwise angular-velocity error.
    pub theta_error: f64,
    pub alpha_rel_error: f64,
    /// `|U^T U - U*^T U*|_F / |U*^T U*|_F`.
    pub precision_rel_error: f64,
    /// Max-abs difference of the rendered densities at `t = 0`.
    pub render_max_abs_error: f64,
    pub render_peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub particles: Vec<ParticleMetrics>,
    pub max_velocity_error: f64,
    pub max_theta_error: f64,
    pub max_alpha_rel_error: f64,
    pub max_precision_rel_error: f64,
    pub max_render_error: f64,
    pub render_resolution: usize,
}

/// Pairs estimated and true particles by minimum summed squared distance
/// between their trajectories over `times`.
pub fn match_particles(truth: &Scene, estimate: &Scene, times: &[f64]) -> Result<Vec<(usize, usize)>> {
    let cost = DMatrix::from_fn(truth.len(), estimate.len(), |i, j| {
        let (a, b) = (&truth.particles[i].trajectory, &estimate.particles[j].trajectory);
        times.iter().map(|&t| (a.at(t) - b.at(t)).norm_squared()).sum::<f64>()
    });
    Ok(rectangular_assignment(&cost)?.pairs)
}

pub fn metrics_report(truth: &Scene, estimate: &Scene, times: &[f64], resolution: usize) -> Result<MetricsReport> {
    if truth.dim() != estimate.dim() {
        return Err(Error::DimensionMismatch("truth and estimate dimension".into()));
    }
    let pairs = match_particles(truth, estimate, times)?;
    let particles: Vec<ParticleMetrics> = pairs
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (&truth.particles[i], &estimate.particles[j]);
            let velocity_error = (&a.trajectory.velocity - &b.trajectory.velocity).amax();
            let theta_error = (&a.angular_velocity.0 - &b.angular_velocity.0).amax();
            let alpha_rel_error = (b.alpha - a.alpha).abs() / a.alpha.abs();
            let pa = a.precision();
            let precision_rel_error = (b.precision() - &pa).norm() / pa.norm();
            let (render_max_abs_error, render_peak) = if truth.dim() == 2 {
                render_error(a, b, resolution)
            } else {
                (f64::NAN, f64::NAN)
            };
            ParticleMetrics {
                truth_index: i,
                estimate_index: j,
                velocity_error,
                theta_error,
                alpha_rel_error,
                precision_rel_error,
                render_max_abs_error,
                render_peak,
            }
        })
        .collect();
    let max = |f: fn(&ParticleMetrics) -> f64| particles.iter().map(f).fold(0.0, f64::max);
    Ok(MetricsReport {
        max_velocity_error: max(|p| p.velocity_error),
        max_theta_error: max(|p| p.theta_error),
        max_alpha_rel_error: max(|p| p.alpha_rel_error),
        max_precision_rel_error: max(|p| p.precision_rel_error),
        max_render_error: max(|p| p.render_max_abs_error),
        render_resolution: resolution,
        particles,
    })
}

/// Window centered on the true particle, wide enough for both densities to
/// decay below `exp(-9)` of their peaks.
fn render_error(a: &crate::model::ParticleParams, b: &crate::model::ParticleParams, resolution: usize) -> (f64, f64) {
    let c = a.trajectory.at(0.0);
    let half = support_radius(&a.shape, 3.0).max(support_radius(&b.shape, 3.0));
    let lower = [c[0] - half, c[1] - half];
    let upper = [c[0] + half, c[1] + half];
    let ra = render_density(a, 0.0, lower, upper, resolution);
    let rb = render_density(b, 0.0, lower, upper, resolution);
    let err = ra.iter().zip(&rb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let peak = ra.iter().copied().fold(0.0, f64::max);
    (err, peak)
}

/// Side-by-side truth and estimate parameters, one row per matched particle.
pub fn parameter_table(truth: Option<&Scene>, estimate: &Scene, pairs: &[(usize, usize)]) -> String {
    let mut out = String::from("particle\tsource\talpha\tU\ttheta\tvelocity\n");
    let fmt_vec = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
    let mut row = |label: &str, n: usize, p: &crate::model::ParticleParams| {
        let _ = writeln!(
            out,
            "{}\t{label}\t{:.4}\t{}\t{}\t{}",
            n + 1,
            p.alpha,
            fmt_vec(&p.shape_entries()),
            fmt_vec(p.angular_velocity.as_slice()),
            fmt_vec(p.trajectory.velocity.as_slice()),
        );
    };
    if let Some(truth) = truth {
        for &(i, j) in pairs {
            row("truth", i, &truth.particles[i]);
            row("estimate", i, &estimate.particles[j]);
        }
    } else {
        for (j, p) in estimate.particles.iter().enumerate() {
            row("estimate", j, p);
        }
    }
    out
}
