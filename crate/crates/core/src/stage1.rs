//! Trajectory recovery from observed modes.
//!
//! Velocities are fitted so that the projected particle centers match the
//! observed sinogram modes under a per-time min-cost assignment. Initial
//! position and acceleration are known.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionGeometry, TrajectoryParams};
use crate::modes::{mode_map, mode_map_velocity_jacobian, newton_refine, ModeSet, Observation, RefineSettings};
use crate::optim::rng::{multivariate_normal, stream_rng};
use crate::optim::{minimize, rectangular_assignment, LbfgsSettings, MinimizeStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub n_trials: usize,
    #[serde(with = "crate::serde_util::vector")]
    pub init_mean: DVector<f64>,
    #[serde(with = "crate::serde_util::matrix")]
    pub init_cov: DMatrix<f64>,
    pub lbfgs: LbfgsSettings,
    /// Upper bound on assignment/minimization alternations per trial.
    pub max_rounds: usize,
    pub refine: RefineSettings,
    /// Refined tracks whose RMS mode residual exceeds this many detector
    /// pitches are flagged.
    pub residual_warning_pitches: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            n_trials: 20,
            init_mean: DVector::from_vec(vec![1.0, 1.0]),
            init_cov: DMatrix::identity(2, 2) * 2.25,
            lbfgs: LbfgsSettings::default(),
            max_rounds: 50,
            refine: RefineSettings::default(),
            residual_warning_pitches: 0.5,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let d = self.init_mean.len();
        if self.n_trials == 0 {
            return Err(Error::InvalidConfig("stage 1 needs at least one trial".into()));
        }
        if self.init_cov.shape() != (d, d) {
            return Err(Error::InvalidConfig(format!("init_cov must be {d}x{d}")));
        }
        if (&self.init_cov - self.init_cov.transpose()).amax() > 1e-12 * self.init_cov.amax().max(1.0)
            || self.init_cov.clone().cholesky().is_none()
        {
            return Err(Error::InvalidConfig("init_cov must be symmetric positive definite".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidConfig("max_rounds must be positive".into()));
        }
        Ok(())
    }
}

/// The parts of each trajectory that are known in advance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownMotion {
    #[serde(with = "crate::serde_util::vector")]
    pub position: DVector<f64>,
    #[serde(with = "crate::serde_util::vector")]
    pub acceleration: DVector<f64>,
}

impl KnownMotion {
    pub fn with_velocity(&self, velocity: DVector<f64>) -> TrajectoryParams {
        TrajectoryParams::new(self.position.clone(), velocity, self.acceleration.clone())
    }
}

/// Observed-mode index matched to each particle, per time index.
pub type ModeAssignment = Vec<Vec<Option<usize>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial_index: usize,
    #[serde(with = "crate::serde_util::lenient_f64")]
    pub loss: f64,
    pub rounds: usize,
    pub status: MinimizeStatus,
    pub failed: bool,
    /// `(round, iteration, loss, gradient norm)` over all inner iterations.
    pub trace: Vec<(usize, usize, f64, f64)>,
    /// Mean over observed times of the directed Hausdorff distance from
    /// observed to predicted modes, after each round.
    #[serde(with = "crate::serde_util::lenient_f64::vec")]
    pub hausdorff: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEstimate {
    pub etas: Vec<TrajectoryParams>,
    pub loss: f64,
    pub assignment: ModeAssignment,
    pub trial_index: usize,
    pub converged: bool,
    /// Per-particle RMS mode residual after refinement.
    #[serde(with = "crate::serde_util::lenient_f64::vec")]
    pub residuals: Vec<f64>,
    /// Set when refinement failed or a residual is implausibly large.
    pub warning: bool,
    pub trials: Vec<TrialSummary>,
}

impl TrajectoryEstimate {
    pub fn trace_tsv(&self) -> String {
        let mut out = String::from("trial\tround\titeration\tloss\tgrad_norm\n");
        for t in &self.trials {
            for &(round, it, loss, g) in &t.trace {
                let _ = writeln!(out, "{}\t{round}\t{it}\t{loss:.17e}\t{g:.17e}", t.trial_index);
            }
        }
        out
    }
}

/// Initial velocities for trial `trial`: `n` i.i.d. draws from the configured Gaussian.
pub fn sample_initial_trajectories(cfg: &Stage1Config, n: usize, trial: usize) -> Result<Vec<DVector<f64>>> {
    let mut rng = stream_rng(cfg.seed, trial as u64);
    (0..n).map(|_| multivariate_normal(&mut rng, &cfg.init_mean, &cfg.init_cov)).collect()
}

fn predictions(etas: &[TrajectoryParams], t: f64, geom: &AcquisitionGeometry) -> Result<Vec<DVector<f64>>> {
    etas.iter().map(|e| mode_map(e, t, geom)).collect()
}

/// Per-time min-cost matching of predicted to observed modes under squared
/// distance. Predictions left unmatched cost nothing.
pub fn assignment_loss(
    etas: &[TrajectoryParams],
    observed: &ModeSet,
    geom: &AcquisitionGeometry,
) -> Result<(f64, ModeAssignment)> {
    if observed.is_empty() {
        return Err(Error::NoObservations);
    }
    let mut loss = 0.0;
    let mut assignment = Vec::with_capacity(observed.num_times());
    for (t, modes) in observed.times.iter().zip(&observed.modes) {
        let mut row = vec![None; etas.len()];
        if !modes.is_empty() && !etas.is_empty() {
            let pred = predictions(etas, *t, geom)?;
            let cost = DMatrix::from_fn(etas.len(), modes.len(), |i, j| (&pred[i] - &modes[j].position).norm_squared());
            if cost.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite("predicted mode".into()));
            }
            let a = rectangular_assignment(&cost)?;
            loss += a.cost;
            for (i, j) in a.pairs {
                row[i] = Some(j);
            }
        }
        assignment.push(row);
    }
    Ok((loss, assignment))
}

/// Matched squared distance and its gradient with respect to the stacked velocities.
pub fn fixed_assignment_loss(
    velocities: &[f64],
    known: &KnownMotion,
    observed: &ModeSet,
    assignment: &ModeAssignment,
    geom: &AcquisitionGeometry,
) -> Result<(f64, Vec<f64>)> {
    let d = known.position.len();
    let etas: Vec<TrajectoryParams> =
        velocities.chunks(d).map(|v| known.with_velocity(DVector::from_column_slice(v))).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; velocities.len()];
    for ((t, modes), row) in observed.times.iter().zip(&observed.modes).zip(assignment) {
        for (n, j) in row.iter().enumerate() {
            let Some(j) = *j else { continue };
            let (r, jac) = mode_map_velocity_jacobian(&etas[n], *t, geom)?;
            let diff = r - &modes[j].position;
            loss += diff.norm_squared();
            let g = jac.tr_mul(&diff) * 2.0;
            for k in 0..d {
                grad[n * d + k] += g[k];
            }
        }
    }
    Ok((loss, grad))
}

/// Largest distance from a point of `from` to its nearest point in `to`.
pub fn directed_hausdorff(from: &[DVector<f64>], to: &[DVector<f64>]) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|b| (a - b).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

fn mean_hausdorff(etas: &[TrajectoryParams], observed: &ModeSet, geom: &AcquisitionGeometry) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (t, modes) in observed.times.iter().zip(&observed.modes) {
        if modes.is_empty() {
            continue;
        }
        let Ok(pred) = predictions(etas, *t, geom) else { return f64::NAN };
        let obs: Vec<DVector<f64>> = modes.iter().map(|m| m.position.clone()).collect();
        total += directed_hausdorff(&obs, &pred);
        count += 1;
    }
    total / count.max(1) as f64
}

struct TrialOutcome {
    summary: TrialSummary,
    velocities: Vec<f64>,
    assignment: ModeAssignment,
    converged: bool,
}

fn run_trial(
    observed: &ModeSet,
    geom: &AcquisitionGeometry,
    known: &KnownMotion,
    cfg: &Stage1Config,
    init: Vec<DVector<f64>>,
    trial_index: usize,
) -> TrialOutcome {
    let d = known.position.len();
    let to_etas = |x: &[f64]| -> Vec<TrajectoryParams> {
        x.chunks(d).map(|v| known.with_velocity(DVector::from_column_slice(v))).collect()
    };
    let mut x: Vec<f64> = init.iter().flat_map(|v| v.iter().copied()).collect();
    let mut summary = TrialSummary {
        trial_index,
        loss: f64::INFINITY,
        rounds: 0,
        status: MinimizeStatus::LineSearchFailure,
        failed: true,
        trace: Vec::new(),
        hausdorff: Vec::new(),
    };
    let fail = |summary: TrialSummary, x: Vec<f64>| TrialOutcome {
        summary,
        velocities: x,
        assignment: Vec::new(),
        converged: false,
    };
    let Ok((_, mut assignment)) = assignment_loss(&to_etas(&x), observed, geom) else {
        return fail(summary, x);
    };
    let mut converged = false;
    let mut iter_offset = 0;
    let mut any_progress = false;
    for round in 0..cfg.max_rounds {
        summary.rounds = round + 1;
        let objective = |v: &[f64]| match fixed_assignment_loss(v, known, observed, &assignment, geom) {
            Ok(r) => r,
            Err(_) => (f64::INFINITY, vec![f64::NAN; v.len()]),
        };
        let Ok(res) = minimize(objective, &x, &cfg.lbfgs) else {
            break;
        };
        any_progress |= res.iterations > 0 || res.status == MinimizeStatus::Converged;
        for e in &res.trace {
            summary.trace.push((round, iter_offset + e.iteration, e.f, e.grad_norm));
        }
        iter_offset += res.iterations;
        summary.status = res.status;
        x = res.x;
        let Ok((_, next)) = assignment_loss(&to_etas(&x), observed, geom) else {
            break;
        };
        summary.hausdorff.push(mean_hausdorff(&to_etas(&x), observed, geom));
        if next == assignment {
            converged = res.status == MinimizeStatus::Converged;
            break;
        }
        assignment = next;
    }
    match assignment_loss(&to_etas(&x), observed, geom) {
        Ok((loss, a)) if loss.is_finite() => {
            summary.loss = loss;
            summary.failed = !any_progress;
            TrialOutcome { summary, velocities: x, assignment: a, converged }
        }
        _ => fail(summary, x),
    }
}

/// Multi-start trajectory recovery followed by per-particle Gauss–Newton refinement.
pub fn optimize_trajectories(
    observed: &ModeSet,
    geom: &AcquisitionGeometry,
    known: &KnownMotion,
    cfg: &Stage1Config,
    n: usize,
) -> Result<TrajectoryEstimate> {
    cfg.validate()?;
    let d = geom.dim();
    if cfg.init_mean.len() != d || known.position.len() != d || known.acceleration.len() != d {
        return Err(Error::DimensionMismatch("stage 1 configuration vs geometry".into()));
    }
    if observed.is_empty() {
        return Err(Error::NoObservations);
    }
    let inits: Vec<Vec<DVector<f64>>> =
        (0..cfg.n_trials).map(|t| sample_initial_trajectories(cfg, n, t)).collect::<Result<_>>()?;
    let outcomes: Vec<TrialOutcome> = inits
        .into_par_iter()
        .enumerate()
        .map(|(t, init)| run_trial(observed, geom, known, cfg, init, t))
        .collect();

    // Lowest loss wins; ties go to the lowest trial index.
    let best = outcomes
        .iter()
        .filter(|o| !o.summary.failed)
        .min_by(|a, b| a.summary.loss.total_cmp(&b.summary.loss).then(a.summary.trial_index.cmp(&b.summary.trial_index)));
    let summaries: Vec<TrialSummary> = outcomes.iter().map(|o| o.summary.clone()).collect();

    let Some(best) = best else {
        let partial = outcomes
            .iter()
            .filter(|o| o.summary.loss.is_finite())
            .min_by(|a, b| a.summary.loss.total_cmp(&b.summary.loss))
            .map(|o| {
                Box::new(TrajectoryEstimate {
                    etas: o.velocities.chunks(d).map(|v| known.with_velocity(DVector::from_column_slice(v))).collect(),
                    loss: o.summary.loss,
                    assignment: o.assignment.clone(),
                    trial_index: o.summary.trial_index,
                    converged: false,
                    residuals: Vec::new(),
                    warning: true,
                    trials: summaries.clone(),
                })
            });
        return Err(Error::TrajectoryTrialsFailed {
            trials: cfg.n_trials,
            best_loss: partial.as_ref().map_or(f64::INFINITY, |p| p.loss),
            best: partial,
        });
    };

    let etas: Vec<TrajectoryParams> =
        best.velocities.chunks(d).map(|v| known.with_velocity(DVector::from_column_slice(v))).collect();
    let refine = RefineSettings { residual_warning: Some(cfg.residual_warning_pitches * geom.detector_pitch()), ..cfg.refine };
    let refined: Vec<(TrajectoryParams, f64, bool)> = etas
        .par_iter()
        .enumerate()
        .map(|(p, eta)| {
            let obs: Vec<Observation> = observed
                .times
                .iter()
                .zip(&observed.modes)
                .zip(&best.assignment)
                .filter_map(|((t, modes), row)| {
                    row[p].map(|j| Observation { time: *t, position: modes[j].position.clone() })
                })
                .collect();
            match newton_refine(eta, &obs, geom, &refine) {
                Ok(r) => (r.eta, r.residual, r.warning),
                Err(_) => (eta.clone(), f64::NAN, true),
            }
        })
        .collect();
    let etas: Vec<TrajectoryParams> = refined.iter().map(|r| r.0.clone()).collect();
    let (loss, assignment) = assignment_loss(&etas, observed, geom)?;
    Ok(TrajectoryEstimate {
        etas,
        loss,
        assignment,
        trial_index: best.summary.trial_index,
        converged: best.converged,
        residuals: refined.iter().map(|r| r.1).collect(),
        warning: refined.iter().any(|r| r.2),
        trials: summaries,
    })
}
