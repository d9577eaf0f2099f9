//! Rotation and morphology recovery with trajectories held fixed.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_dim, AcquisitionGeometry, RotationParams, TrajectoryParams};
use crate::model::{frames_at, gradient_block_len, ray_directions, shape_dim, ChainRule, Frame, ParticleParams, Partials, Scene, Sinogram};
use crate::optim::rng::{standard_normal, stream_rng, uniform};
use crate::optim::{minimize, nnls, LbfgsSettings, MinimizeStatus};

/// Huber function: quadratic up to `delta`, linear beyond.
pub fn huber(u: f64, delta: f64) -> f64 {
    let a = u.abs();
    if a <= delta {
        0.5 * u * u
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_derivative(u: f64, delta: f64) -> f64 {
    u.clamp(-delta, delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    /// Absolute Huber threshold. When absent, `huber_delta_fraction` times
    /// the sinogram maximum is used.
    pub huber_delta: Option<f64>,
    pub huber_delta_fraction: f64,
    pub n_rot_grid: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub n_morph_trials: usize,
    pub lbfgs: LbfgsSettings,
    /// Also fit the velocities against the full sinogram.
    pub refine_velocity: bool,
    pub placeholder_alpha: f64,
    /// Placeholder diagonal of `U`; extended by halving for higher dimensions.
    pub placeholder_diagonal: Vec<f64>,
    pub placeholder_offdiag_std: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            huber_delta: None,
            huber_delta_fraction: 0.1,
            n_rot_grid: 200,
            omega_min: 2.0,
            omega_max: 6.0,
            n_morph_trials: 3,
            lbfgs: LbfgsSettings { max_iter: 2000, ..LbfgsSettings::default() },
            refine_velocity: true,
            placeholder_alpha: 12.5,
            placeholder_diagonal: vec![30.0, 15.0],
            placeholder_offdiag_std: 1.0,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if let Some(d) = self.huber_delta {
            if !(d > 0.0 && d.is_finite()) {
                return bad("huber_delta must be positive");
            }
        }
        if !(self.huber_delta_fraction > 0.0 && self.huber_delta_fraction.is_finite()) {
            return bad("huber_delta_fraction must be positive");
        }
        if !(self.omega_min < self.omega_max) || !self.omega_min.is_finite() || !self.omega_max.is_finite() {
            return bad("omega_min must be below omega_max");
        }
        if self.n_rot_grid < 2 {
            return bad("n_rot_grid must be at least 2");
        }
        if self.n_morph_trials == 0 {
            return bad("n_morph_trials must be at least 1");
        }
        if !(self.placeholder_alpha > 0.0) || self.placeholder_diagonal.iter().any(|&v| !(v > 0.0)) {
            return bad("placeholders must be positive");
        }
        Ok(())
    }

    pub fn delta_for(&self, data: &Sinogram) -> f64 {
        self.huber_delta.unwrap_or_else(|| self.huber_delta_fraction * data.max_value().max(f64::MIN_POSITIVE))
    }

    /// Equally spaced rotation grid, endpoints included.
    pub fn rotation_grid(&self) -> Vec<f64> {
        let n = self.n_rot_grid;
        (0..n).map(|i| self.omega_min + (self.omega_max - self.omega_min) * i as f64 / (n - 1) as f64).collect()
    }

    fn placeholder_diag(&self, d: usize) -> Vec<f64> {
        let mut diag = self.placeholder_diagonal.clone();
        while diag.len() < d {
            let last = *diag.last().unwrap_or(&30.0);
            diag.push(0.5 * last);
        }
        diag.truncate(d);
        diag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologyTrial {
    pub trial_index: usize,
    #[serde(with = "crate::serde_util::lenient_f64")]
    pub initial_loss: f64,
    #[serde(with = "crate::serde_util::lenient_f64")]
    pub loss: f64,
    pub iterations: usize,
    pub status: MinimizeStatus,
    pub failed: bool,
    /// `(iteration, loss, gradient norm)`.
    pub trace: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologyEstimate {
    pub thetas: Vec<RotationParams>,
    pub alphas: Vec<f64>,
    #[serde(with = "matrices")]
    pub shapes: Vec<DMatrix<f64>>,
    /// Trajectories used for the final fit; differ from the input only when
    /// velocities are refined.
    pub etas: Vec<TrajectoryParams>,
    pub loss: f64,
    pub huber_delta: f64,
    pub trial_index: usize,
    pub converged: bool,
    /// Rotation grid-search result that seeded the first trial.
    pub initial_thetas: Vec<RotationParams>,
    pub nnls_rank_deficient: bool,
    pub trials: Vec<MorphologyTrial>,
}

mod matrices {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "crate::serde_util::matrix")] DMatrix<f64>);

    pub fn serialize<S: Serializer>(m: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|x| Wrapped(x.clone())).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Ok(Vec::<Wrapped>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

impl MorphologyEstimate {
    pub fn scene(&self) -> Scene {
        let particles = (0..self.alphas.len())
            .map(|n| ParticleParams {
                alpha: self.alphas[n],
                shape: self.shapes[n].clone(),
                angular_velocity: self.thetas[n].clone(),
                trajectory: self.etas[n].clone(),
            })
            .collect();
        Scene { particles }
    }

    pub fn trace_tsv(&self) -> String {
        let mut out = String::from("trial\titeration\tloss\tgrad_norm\n");
        for t in &self.trials {
            for &(it, loss, g) in &t.trace {
                let _ = writeln!(out, "{}\t{it}\t{loss:.17e}\t{g:.17e}", t.trial_index);
            }
        }
        out
    }
}

/// Sinogram data plus cached ray geometry.
pub struct Stage2Problem<'a> {
    data: &'a Sinogram,
    rays: Vec<(Vec<f64>, f64)>,
    times: Vec<f64>,
    delta: f64,
}

impl<'a> Stage2Problem<'a> {
    pub fn new(data: &'a Sinogram, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidConfig("Huber delta must be positive".into()));
        }
        let geom = data.geometry();
        Ok(Self { data, rays: ray_directions(geom), times: geom.times(), delta })
    }

    fn geom(&self) -> &AcquisitionGeometry {
        self.data.geometry()
    }

    fn norm(&self) -> f64 {
        1.0 / (self.data.num_times() * self.data.num_detectors()) as f64
    }

    fn check(&self, scene: &Scene) -> Result<()> {
        scene.validate()?;
        if scene.dim() != self.geom().dim() {
            return Err(Error::DimensionMismatch("scene and sinogram dimension".into()));
        }
        Ok(())
    }

    /// Normalized Huber loss of the data misfit.
    pub fn loss(&self, scene: &Scene) -> Result<f64> {
        self.check(scene)?;
        let s = &self.geom().source;
        let cols: Vec<f64> = (0..self.times.len())
            .into_par_iter()
            .map(|m_t| {
                let frames = frames_at(scene, s, self.times[m_t]);
                let col = self.data.column(m_t);
                let mut acc = 0.0;
                for ((delta, n), &g) in self.rays.iter().zip(col) {
                    let f: f64 = scene.particles.iter().zip(&frames).map(|(p, fr)| p.alpha * fr.value(delta, *n)).sum();
                    acc += huber(g - f, self.delta);
                }
                acc
            })
            .collect();
        Ok(cols.iter().sum::<f64>() * self.norm())
    }

    /// Loss and its gradient in canonical per-particle order
    /// (`alpha`, upper-triangular `U`, `Theta`, `v`).
    pub fn loss_and_gradient(&self, scene: &Scene) -> Result<(f64, Vec<f64>)> {
        self.check(scene)?;
        let d = scene.dim();
        let n_part = scene.len();
        let block = gradient_block_len(d);
        let s = &self.geom().source;
        let per_col: Vec<(f64, Vec<f64>)> = (0..self.times.len())
            .into_par_iter()
            .map(|m_t| {
                let t = self.times[m_t];
                let chains: Vec<ChainRule> = scene.particles.iter().map(|p| ChainRule::new(p, t)).collect();
                let frames: Vec<Frame> = scene
                    .particles
                    .iter()
                    .zip(&chains)
                    .map(|(p, c)| Frame::for_particle(p, c.rotation(), t, s))
                    .collect();
                let mut partials: Vec<Partials> = (0..n_part).map(|_| Partials::new(d)).collect();
                let mut gw = vec![0.0; n_part * d * d];
                let mut gc = vec![0.0; n_part * d];
                let mut grad = vec![0.0; n_part * block];
                let mut loss = 0.0;
                for ((delta, norm), &g) in self.rays.iter().zip(self.data.column(m_t)) {
                    let mut f = 0.0;
                    for ((p, fr), part) in scene.particles.iter().zip(&frames).zip(partials.iter_mut()) {
                        fr.value_with_partials(delta, *norm, part);
                        f += p.alpha * part.value;
                    }
                    let u = g - f;
                    loss += huber(u, self.delta);
                    let w = -huber_derivative(u, self.delta);
                    if w == 0.0 {
                        continue;
                    }
                    for (k, ((p, fr), part)) in scene.particles.iter().zip(&frames).zip(&partials).enumerate() {
                        grad[k * block] += w * part.value;
                        fr.accumulate_gradient(
                            delta,
                            part,
                            w * p.alpha,
                            &mut gw[k * d * d..(k + 1) * d * d],
                            &mut gc[k * d..(k + 1) * d],
                        );
                    }
                }
                for (k, chain) in chains.iter().enumerate() {
                    chain.apply(
                        &gw[k * d * d..(k + 1) * d * d],
                        &gc[k * d..(k + 1) * d],
                        1.0,
                        &mut grad[k * block + 1..(k + 1) * block],
                    );
                }
                (loss, grad)
            })
            .collect();
        let scale = self.norm();
        let mut loss = 0.0;
        let mut grad = vec![0.0; n_part * block];
        for (l, g) in &per_col {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    /// Diagonal of `J^T J` for the unweighted residual, canonical order.
    pub fn gauss_newton_diagonal(&self, scene: &Scene) -> Result<Vec<f64>> {
        self.check(scene)?;
        let d = scene.dim();
        let block = gradient_block_len(d);
        let s = &self.geom().source;
        let per_col: Vec<Vec<f64>> = (0..self.times.len())
            .into_par_iter()
            .map(|m_t| {
                let t = self.times[m_t];
                let mut diag = vec![0.0; scene.len() * block];
                let mut part = Partials::new(d);
                let mut row = vec![0.0; block];
                for (k, p) in scene.particles.iter().enumerate() {
                    let chain = ChainRule::new(p, t);
                    let fr = Frame::for_particle(p, chain.rotation(), t, s);
                    for (delta, norm) in &self.rays {
                        fr.value_with_partials(delta, *norm, &mut part);
                        let mut gw = vec![0.0; d * d];
                        let mut gc = vec![0.0; d];
                        fr.accumulate_gradient(delta, &part, 1.0, &mut gw, &mut gc);
                        row.iter_mut().for_each(|x| *x = 0.0);
                        row[0] = part.value;
                        chain.apply(&gw, &gc, p.alpha, &mut row[1..]);
                        for (acc, x) in diag[k * block..(k + 1) * block].iter_mut().zip(&row) {
                            *acc += x * x;
                        }
                    }
                }
                diag
            })
            .collect();
        let scale = self.norm();
        let mut diag = vec![0.0; scene.len() * block];
        for col in &per_col {
            for (a, b) in diag.iter_mut().zip(col) {
                *a += b;
            }
        }
        diag.iter_mut().for_each(|x| *x *= scale);
        Ok(diag)
    }

    /// Time-major sinogram of one particle with unit attenuation.
    pub fn unit_sinogram(&self, p: &ParticleParams) -> Vec<f64> {
        let unit = Scene { particles: vec![ParticleParams { alpha: 1.0, ..p.clone() }] };
        let s = &self.geom().source;
        let cols: Vec<Vec<f64>> = (0..self.times.len())
            .into_par_iter()
            .map(|m_t| {
                let fr = &frames_at(&unit, s, self.times[m_t])[0];
                self.rays.iter().map(|(delta, n)| fr.value(delta, *n)).collect()
            })
            .collect();
        cols.concat()
    }
}

/// Convenience wrapper: loss and canonical gradient for `scene` against `data`.
pub fn stage2_objective(scene: &Scene, data: &Sinogram, delta: f64) -> Result<(f64, Vec<f64>)> {
    Stage2Problem::new(data, delta)?.loss_and_gradient(scene)
}

fn diagonal_ratio(u: &DMatrix<f64>) -> f64 {
    let diag: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

/// Coordinate-wise grid search for particle `n`'s angular velocity against
/// the data with all other particles' current contributions removed.
///
/// Coordinates are scanned in ascending order starting from the current
/// value; ties go to the smaller rate.
pub fn grid_search_rotation(
    n: usize,
    scene: &Scene,
    data: &Sinogram,
    grid: &[f64],
) -> Result<RotationParams> {
    scene.validate()?;
    let p = scene.particles.get(n).ok_or_else(|| Error::InvalidConfig(format!("no particle {n}")))?;
    let ratio = diagonal_ratio(&p.shape);
    if !(ratio >= 1.01) {
        return Err(Error::IsotropicPlaceholder { particle: n, ratio });
    }
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty rotation grid".into()));
    }
    let problem = Stage2Problem::new(data, 1.0)?;
    let mut residual = data.values().to_vec();
    for (m, other) in scene.particles.iter().enumerate() {
        if m != n {
            for (r, x) in residual.iter_mut().zip(problem.unit_sinogram(other)) {
                *r -= other.alpha * x;
            }
        }
    }
    let mut theta = p.angular_velocity.clone();
    for k in 0..rotation_dim(scene.dim()) {
        let scores: Vec<f64> = grid
            .par_iter()
            .map(|&w| {
                let mut cand = p.clone();
                cand.angular_velocity = theta.clone();
                cand.angular_velocity.0[k] = w;
                let x = problem.unit_sinogram(&cand);
                residual.iter().zip(&x).map(|(r, x)| (r - p.alpha * x).powi(2)).sum()
            })
            .collect();
        let mut best = 0;
        for (i, &sc) in scores.iter().enumerate() {
            if sc < scores[best] {
                best = i;
            }
        }
        theta.0[k] = grid[best];
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationFit {
    pub alphas: Vec<f64>,
    pub rank_deficient: bool,
}

/// Non-negative least-squares attenuations given the other parameters.
pub fn nnls_attenuation(scene: &Scene, data: &Sinogram) -> Result<AttenuationFit> {
    scene.validate()?;
    let problem = Stage2Problem::new(data, 1.0)?;
    let columns: Vec<Vec<f64>> = scene.particles.iter().map(|p| problem.unit_sinogram(p)).collect();
    let m = data.values().len();
    let phi = DMatrix::from_fn(m, columns.len(), |i, j| columns[j][i]);
    let b = DVector::from_column_slice(data.values());
    let sol = nnls(&phi, &b)?;
    Ok(AttenuationFit { alphas: sol.x.iter().copied().collect(), rank_deficient: sol.rank_deficient })
}

/// Unconstrained coordinates: per particle `Theta`, `log alpha`, `log` of the
/// diagonal of `U`, the strictly upper entries of `U`, and optionally `v`.
struct Packing {
    d: usize,
    refine_velocity: bool,
}

impl Packing {
    fn block(&self) -> usize {
        rotation_dim(self.d) + 1 + shape_dim(self.d) + if self.refine_velocity { self.d } else { 0 }
    }

    fn pack(&self, scene: &Scene) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.block() * scene.len());
        for p in &scene.particles {
            z.extend(p.angular_velocity.0.iter());
            z.push(p.alpha.ln());
            for i in 0..self.d {
                z.push(p.shape[(i, i)].ln());
            }
            for i in 0..self.d {
                for j in i + 1..self.d {
                    z.push(p.shape[(i, j)]);
                }
            }
            if self.refine_velocity {
                z.extend(p.trajectory.velocity.iter());
            }
        }
        z
    }

    fn unpack(&self, template: &Scene, z: &[f64]) -> Scene {
        let (d, rd) = (self.d, rotation_dim(self.d));
        let particles = template
            .particles
            .iter()
            .zip(z.chunks(self.block()))
            .map(|(p, x)| {
                let mut shape = DMatrix::zeros(d, d);
                let mut k = rd + 1;
                for i in 0..d {
                    shape[(i, i)] = x[k].exp();
                    k += 1;
                }
                for i in 0..d {
                    for j in i + 1..d {
                        shape[(i, j)] = x[k];
                        k += 1;
                    }
                }
                let mut trajectory = p.trajectory.clone();
                if self.refine_velocity {
                    trajectory.velocity = DVector::from_column_slice(&x[k..k + d]);
                }
                ParticleParams {
                    alpha: x[rd].exp(),
                    shape,
                    angular_velocity: RotationParams::new(x[..rd].to_vec()),
                    trajectory,
                }
            })
            .collect();
        Scene { particles }
    }

    /// Maps a canonical gradient to the packed coordinates.
    fn pull_back(&self, scene: &Scene, canonical: &[f64]) -> Vec<f64> {
        let (d, rd) = (self.d, rotation_dim(self.d));
        let cb = gradient_block_len(d);
        let tri_index = |i: usize, j: usize| -> usize {
            // Row-major position of (i, j), i <= j, in the upper triangle.
            i * d - i * (i + 1) / 2 + j
        };
        let mut out = Vec::with_capacity(self.block() * scene.len());
        for (n, p) in scene.particles.iter().enumerate() {
            let g = &canonical[n * cb..(n + 1) * cb];
            let u_off = 1;
            let th_off = 1 + shape_dim(d);
            let v_off = th_off + rd;
            out.extend_from_slice(&g[th_off..th_off + rd]);
            out.push(g[0] * p.alpha);
            for i in 0..d {
                out.push(g[u_off + tri_index(i, i)] * p.shape[(i, i)]);
            }
            for i in 0..d {
                for j in i + 1..d {
                    out.push(g[u_off + tri_index(i, j)]);
                }
            }
            if self.refine_velocity {
                out.extend_from_slice(&g[v_off..v_off + d]);
            }
        }
        out
    }
}

/// Multi-trial Huber fit of rotations, attenuations and shapes (and
/// optionally velocities) with the trajectories from stage 1.
pub fn optimize_morphology(etas: &[TrajectoryParams], data: &Sinogram, cfg: &Stage2Config) -> Result<MorphologyEstimate> {
    cfg.validate()?;
    let geom = data.geometry();
    let d = geom.dim();
    if etas.is_empty() {
        return Err(Error::InvalidConfig("no trajectories to fit".into()));
    }
    if etas.iter().any(|e| e.dim() != d) {
        return Err(Error::DimensionMismatch("trajectory and geometry dimension".into()));
    }
    let delta = cfg.delta_for(data);
    let problem = Stage2Problem::new(data, delta)?;
    let rd = rotation_dim(d);

    // Placeholder morphology.
    let diag = cfg.placeholder_diag(d);
    let mut rng = stream_rng(cfg.seed, 0);
    let mut scene = Scene {
        particles: etas
            .iter()
            .map(|eta| {
                let mut u = DMatrix::from_diagonal(&DVector::from_column_slice(&diag));
                for i in 0..d {
                    for j in i + 1..d {
                        u[(i, j)] = cfg.placeholder_offdiag_std * standard_normal(&mut rng);
                    }
                }
                ParticleParams {
                    alpha: cfg.placeholder_alpha,
                    shape: u,
                    angular_velocity: RotationParams::zeros(d),
                    trajectory: eta.clone(),
                }
            })
            .collect(),
    };

    // One sweep of rotation grid search, then attenuations.
    let grid = cfg.rotation_grid();
    for n in 0..scene.len() {
        scene.particles[n].angular_velocity = grid_search_rotation(n, &scene, data, &grid)?;
    }
    let initial_thetas: Vec<RotationParams> = scene.particles.iter().map(|p| p.angular_velocity.clone()).collect();
    let fit = nnls_attenuation(&scene, data)?;
    let mut rank_deficient = fit.rank_deficient;
    apply_alphas(&mut scene, &fit.alphas);

    let mut starts = vec![scene.clone()];
    for trial in 1..cfg.n_morph_trials {
        let mut rng = stream_rng(cfg.seed, trial as u64);
        let mut s = scene.clone();
        for p in &mut s.particles {
            let omega: Vec<f64> = (0..rd).map(|_| uniform(&mut rng, cfg.omega_min, cfg.omega_max)).collect();
            p.angular_velocity = RotationParams::new(omega);
        }
        let fit = nnls_attenuation(&s, data)?;
        rank_deficient |= fit.rank_deficient;
        apply_alphas(&mut s, &fit.alphas);
        starts.push(s);
    }

    let results: Vec<(MorphologyTrial, Option<Scene>)> =
        starts.iter().enumerate().map(|(i, start)| fit_from(&problem, start, cfg, i)).collect();

    let trials: Vec<MorphologyTrial> = results.iter().map(|r| r.0.clone()).collect();
    let build = |idx: usize, converged: bool| {
        let s = results[idx].1.clone().unwrap_or_else(|| starts[idx].clone());
        MorphologyEstimate {
            thetas: s.particles.iter().map(|p| p.angular_velocity.clone()).collect(),
            alphas: s.particles.iter().map(|p| p.alpha).collect(),
            shapes: s.particles.iter().map(|p| p.shape.clone()).collect(),
            etas: s.particles.iter().map(|p| p.trajectory.clone()).collect(),
            loss: results[idx].0.loss,
            huber_delta: delta,
            trial_index: idx,
            converged,
            initial_thetas: initial_thetas.clone(),
            nnls_rank_deficient: rank_deficient,
            trials: trials.clone(),
        }
    };
    let pick = |allow_failed: bool| {
        (0..results.len())
            .filter(|&i| allow_failed || !results[i].0.failed)
            .filter(|&i| results[i].1.is_some())
            .min_by(|&a, &b| results[a].0.loss.total_cmp(&results[b].0.loss).then(a.cmp(&b)))
    };
    match pick(false) {
        Some(i) => Ok(build(i, results[i].0.status == MinimizeStatus::Converged)),
        None => {
            let best = pick(true).map(|i| Box::new(build(i, false)));
            Err(Error::MorphologyTrialsFailed {
                trials: cfg.n_morph_trials,
                best_loss: best.as_ref().map_or(f64::INFINITY, |b| b.loss),
                best,
            })
        }
    }
}

/// One quasi-Newton fit of the full morphology starting from `start`.
pub fn fit_from(problem: &Stage2Problem<'_>, start: &Scene, cfg: &Stage2Config, trial_index: usize) -> (MorphologyTrial, Option<Scene>) {
    let packing = Packing { d: start.dim(), refine_velocity: cfg.refine_velocity };
    // Diagonal preconditioning: optimize y with z = c * y, c_i = 1/sqrt(D_ii).
    let scales = match problem.gauss_newton_diagonal(start) {
        Ok(diag) => {
            let root: Vec<f64> = diag.iter().map(|x| x.max(0.0).sqrt()).collect();
            let packed = packing.pull_back(start, &root);
            let floor = packed.iter().fold(0.0_f64, |m, x| m.max(x.abs())) * 1e-6;
            packed.iter().map(|x| 1.0 / x.abs().max(floor).max(f64::MIN_POSITIVE)).collect()
        }
        Err(_) => vec![1.0; packing.block() * start.len()],
    };
    let objective = |y: &[f64]| {
        let z: Vec<f64> = y.iter().zip(&scales).map(|(a, c)| a * c).collect();
        let s = packing.unpack(start, &z);
        match problem.loss_and_gradient(&s) {
            Ok((f, g)) => (f, packing.pull_back(&s, &g).iter().zip(&scales).map(|(a, c)| a * c).collect()),
            Err(_) => (f64::INFINITY, vec![f64::NAN; y.len()]),
        }
    };
    let y0: Vec<f64> = packing.pack(start).iter().zip(&scales).map(|(a, c)| a / c).collect();
    match minimize(objective, &y0, &cfg.lbfgs) {
        Ok(res) => {
            let failed = res.status == MinimizeStatus::LineSearchFailure && res.iterations == 0;
            let z: Vec<f64> = res.x.iter().zip(&scales).map(|(a, c)| a * c).collect();
            let fitted = packing.unpack(start, &z);
            (
                MorphologyTrial {
                    trial_index,
                    initial_loss: res.trace.first().map_or(f64::NAN, |e| e.f),
                    loss: res.f,
                    iterations: res.iterations,
                    status: res.status,
                    failed,
                    trace: res.trace.iter().map(|e| (e.iteration, e.f, e.grad_norm)).collect(),
                },
                Some(fitted),
            )
        }
        Err(_) => (
            MorphologyTrial {
                trial_index,
                initial_loss: f64::NAN,
                loss: f64::INFINITY,
                iterations: 0,
                status: MinimizeStatus::LineSearchFailure,
                failed: true,
                trace: Vec::new(),
            },
            None,
        ),
    }
}

pub fn apply_alphas(scene: &mut Scene, alphas: &[f64]) {
    for (p, &a) in scene.particles.iter_mut().zip(alphas) {
        // Zero attenuation would leave the log-parameterization undefined.
        p.alpha = a.max(1e-6);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate_sinogram;
    use crate::optim::check_gradient;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn geom(mt: usize, mr: usize) -> AcquisitionGeometry {
        AcquisitionGeometry::new(v(&[-1.0, 1.0]), v(&[4.0, 1.0]), v(&[4.0, -3.0]), mr, (0.0, 1.5), mt).unwrap()
    }

    fn particle(alpha: f64, u: [f64; 3], theta: f64, vel: [f64; 2]) -> ParticleParams {
        ParticleParams {
            alpha,
            shape: DMatrix::from_row_slice(2, 2, &[u[0], u[1], 0.0, u[2]]),
            angular_velocity: RotationParams::new(vec![theta]),
            trajectory: TrajectoryParams::new(v(&[1.0, 1.0]), v(&vel), v(&[0.0, -9.81])),
        }
    }

    fn two_particles() -> Scene {
        Scene::new(vec![
            particle(15.0, [10.3, 10.4, 18.0], 5.93, [1.0, 3.0]),
            particle(21.9, [21.4, 11.3, 7.7], 5.2, [1.5, 1.8]),
        ])
        .unwrap()
    }

    #[test]
    fn huber_examples() {
        let d = 0.3;
        assert_eq!(huber(0.0, d), 0.0);
        assert!((huber(d, d) - 0.5 * d * d).abs() < 1e-16);
        assert!((huber(2.0 * d, d) - 1.5 * d * d).abs() < 1e-15);
        assert_eq!(huber(-0.7, d), huber(0.7, d));
    }

    #[test]
    fn zero_loss_at_truth() {
        let scene = two_particles();
        let data = simulate_sinogram(&scene, &geom(40, 32)).unwrap();
        let (loss, grad) = stage2_objective(&scene, &data, 1.0).unwrap();
        assert!(loss <= 1e-20);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_differences() {
        let scene = two_particles();
        let data = simulate_sinogram(&scene, &geom(60, 48)).unwrap();
        let mut guess = scene.clone();
        guess.particles[0].alpha *= 1.1;
        guess.particles[1].angular_velocity.0[0] += 0.05;
        guess.particles[0].shape[(0, 1)] += 0.5;
        guess.particles[1].trajectory.velocity[0] += 0.01;
        let delta = 0.1 * data.max_value();
        let x0 = crate::model::canonical_parameters(&guess);
        let f = |x: &[f64]| stage2_objective(&crate::model::scene_from_canonical(&guess, x), &data, delta).unwrap();
        let check = check_gradient(f, &x0, 1e-6);
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }

    #[test]
    fn packed_gradient_matches_differences() {
        let scene = two_particles();
        let data = simulate_sinogram(&scene, &geom(40, 32)).unwrap();
        let problem = Stage2Problem::new(&data, 0.1 * data.max_value()).unwrap();
        let packing = Packing { d: 2, refine_velocity: true };
        let mut guess = scene.clone();
        guess.particles[1].alpha *= 0.9;
        guess.particles[0].angular_velocity.0[0] -= 0.04;
        let f = |z: &[f64]| {
            let s = packing.unpack(&guess, z);
            let (l, g) = problem.loss_and_gradient(&s).unwrap();
            (l, packing.pull_back(&s, &g))
        };
        let z0 = packing.pack(&guess);
        assert!((packing.unpack(&guess, &z0).particles[1].alpha - guess.particles[1].alpha).abs() < 1e-13);
        let check = check_gradient(f, &z0, 1e-7);
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }

    #[test]
    fn grid_search_finds_zero_rate() {
        let mut scene = two_particles();
        scene.particles.truncate(1);
        scene.particles[0].angular_velocity = RotationParams::new(vec![0.0]);
        let data = simulate_sinogram(&scene, &geom(60, 64)).unwrap();
        let grid: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let theta = grid_search_rotation(0, &scene, &data, &grid).unwrap();
        assert!(theta.0[0].abs() < 1e-12);
    }

    #[test]
    fn isotropic_placeholder_is_rejected() {
        let mut scene = two_particles();
        scene.particles[0].shape = DMatrix::identity(2, 2) * 10.0;
        let data = simulate_sinogram(&scene, &geom(10, 16)).unwrap();
        assert!(matches!(
            grid_search_rotation(0, &scene, &data, &[2.0, 3.0]),
            Err(Error::IsotropicPlaceholder { particle: 0, .. })
        ));
    }

    #[test]
    fn nnls_recovers_consistent_alphas() {
        let scene = two_particles();
        let data = simulate_sinogram(&scene, &geom(60, 64)).unwrap();
        let fit = nnls_attenuation(&scene, &data).unwrap();
        for (a, p) in fit.alphas.iter().zip(&scene.particles) {
            assert!((a - p.alpha).abs() < 1e-8 * p.alpha);
        }
    }
}
