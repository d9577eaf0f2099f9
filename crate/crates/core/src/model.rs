//! Generative forward model.
//!
//! A particle is the isotropic template `rho_0(x) = exp(-|x|^2)` deformed by
//! an upper-triangular shape matrix `U`, rotated at a constant angular rate
//! and carried along a quadratic trajectory. At time `t` its density is
//! `alpha * rho_0(U R(t Theta)^T (x - C(t)))`. The line integral of such a
//! Gaussian along the ray from `s` through `r` has the closed form evaluated
//! by [`xray_gaussian`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    rotation_dim, rotation_matrix, rotation_matrix_with_jacobian, AcquisitionGeometry,
    RotationParams, TrajectoryParams,
};
use crate::serde_util;

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Number of free entries in an upper-triangular `d x d` matrix.
pub fn shape_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Row-major `(i, j)`, `i <= j`, positions of the free shape entries.
pub fn upper_triangle(d: usize) -> Vec<(usize, usize)> {
    let mut idx = Vec::with_capacity(shape_dim(d));
    for i in 0..d {
        for j in i..d {
            idx.push((i, j));
        }
    }
    idx
}

/// Full parameter set of one particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleParams {
    pub alpha: f64,
    /// Upper-triangular shape matrix with positive diagonal.
    #[serde(with = "serde_util::matrix")]
    pub shape: DMatrix<f64>,
    pub angular_velocity: RotationParams,
    pub trajectory: TrajectoryParams,
}

impl ParticleParams {
    pub fn dim(&self) -> usize {
        self.trajectory.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        self.trajectory.check_dims()?;
        if self.shape.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "shape matrix is {:?}, expected {d}x{d}",
                self.shape.shape()
            )));
        }
        if self.angular_velocity.len() != rotation_dim(d) {
            return Err(Error::DimensionMismatch(format!(
                "angular velocity has {} components, expected {}",
                self.angular_velocity.len(),
                rotation_dim(d)
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("attenuation must be positive, got {}", self.alpha)));
        }
        for i in 0..d {
            if !(self.shape[(i, i)] > 0.0) {
                return Err(Error::InvalidConfig("shape diagonal must be positive".into()));
            }
            for j in 0..i {
                if self.shape[(i, j)] != 0.0 {
                    return Err(Error::InvalidConfig("shape matrix must be upper triangular".into()));
                }
            }
        }
        if self.shape.iter().any(|v| !v.is_finite())
            || self.angular_velocity.0.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("particle parameters".into()));
        }
        Ok(())
    }

    /// Free entries of the shape matrix in row-major upper-triangular order.
    pub fn shape_entries(&self) -> Vec<f64> {
        upper_triangle(self.dim()).into_iter().map(|(i, j)| self.shape[(i, j)]).collect()
    }

    /// `U^T U`, the quantity the density actually depends on.
    pub fn precision(&self) -> DMatrix<f64> {
        self.shape.transpose() * &self.shape
    }

    /// Density of this particle at `x` and time `t`.
    pub fn density(&self, x: &DVector<f64>, t: f64) -> f64 {
        let (u_eff, center) = effective_gaussian(self, t);
        let y = u_eff * (x - center);
        self.alpha * (-y.norm_squared()).exp()
    }
}

/// An ordered collection of particles sharing one ambient dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub particles: Vec<ParticleParams>,
}

impl Scene {
    pub fn new(particles: Vec<ParticleParams>) -> Result<Self> {
        let scene = Self { particles };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles.first().map_or(0, ParticleParams::dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles.is_empty() {
            return Err(Error::InvalidConfig("scene has no particles".into()));
        }
        let d = self.dim();
        for p in &self.particles {
            if p.dim() != d {
                return Err(Error::DimensionMismatch("particles differ in dimension".into()));
            }
            p.validate()?;
        }
        Ok(())
    }

    /// Trajectory parameters of every particle.
    pub fn trajectories(&self) -> Vec<TrajectoryParams> {
        self.particles.iter().map(|p| p.trajectory.clone()).collect()
    }
}

/// Projection values on the detector-by-time grid, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    values: Vec<f64>,
    geometry: AcquisitionGeometry,
}

impl Sinogram {
    /// `values[m_t * num_detectors + m_r]`.
    pub fn from_values(values: Vec<f64>, geometry: AcquisitionGeometry) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.num_detectors * geometry.num_times {
            return Err(Error::DimensionMismatch(format!(
                "sinogram has {} values, geometry expects {}x{}",
                values.len(),
                geometry.num_detectors,
                geometry.num_times
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sinogram values".into()));
        }
        Ok(Self { values, geometry })
    }

    pub fn geometry(&self) -> &AcquisitionGeometry {
        &self.geometry
    }

    pub fn num_detectors(&self) -> usize {
        self.geometry.num_detectors
    }

    pub fn num_times(&self) -> usize {
        self.geometry.num_times
    }

    pub fn value(&self, m_r: usize, m_t: usize) -> f64 {
        self.values[m_t * self.geometry.num_detectors + m_r]
    }

    /// All detector values at time index `m_t`.
    pub fn column(&self, m_t: usize) -> &[f64] {
        let n = self.geometry.num_detectors;
        &self.values[m_t * n..(m_t + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Effective shape matrix `U R(t Theta)^T` and center `C(t)` of a particle, so
/// that its template density at time `t` is `rho_0(U_eff (x - center))`.
pub fn effective_gaussian(p: &ParticleParams, t: f64) -> (DMatrix<f64>, DVector<f64>) {
    let d = p.dim();
    let r = rotation_matrix(&p.angular_velocity.scaled(t), d)
        .expect("particle angular velocity has the rotation dimension");
    (&p.shape * r.transpose(), p.trajectory.at(t))
}

/// Closed-form line integral of `rho_0(U (x - center))` along the line
/// through `s` and `r`.
pub fn xray_gaussian(
    u: &DMatrix<f64>,
    center: &DVector<f64>,
    s: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<f64> {
    let d = center.len();
    if u.shape() != (d, d) || s.len() != d || r.len() != d {
        return Err(Error::DimensionMismatch("ray transform operands".into()));
    }
    let delta = r - s;
    let delta_norm = delta.norm();
    if delta_norm == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    // Hadamard ratio: |det U| relative to the product of column norms.
    let col_prod: f64 = u.column_iter().map(|c| c.norm()).product();
    if col_prod == 0.0 || u.determinant().abs() <= 1e-13 * col_prod {
        return Err(Error::SingularShape);
    }
    let frame = Frame::new(u, center, s);
    Ok(frame.value(delta.as_slice(), delta_norm))
}

/// Row-major small dense matrix-vector product `out = m v`.
#[inline]
fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-(particle, time) precomputation for fast evaluation along many rays
/// sharing one source.
#[derive(Debug, Clone)]
pub(crate) struct Frame {
    d: usize,
    /// Effective shape, row-major.
    w: Vec<f64>,
    /// `s - center`.
    offset: Vec<f64>,
    /// `W (s - center)`.
    b: Vec<f64>,
}

/// Scratch space for [`Frame::value_with_partials`].
#[derive(Debug, Clone)]
pub(crate) struct Partials {
    pub value: f64,
    a: Vec<f64>,
    b_perp: Vec<f64>,
    z: Vec<f64>,
    inv_q: f64,
}

impl Partials {
    pub fn new(d: usize) -> Self {
        Self { value: 0.0, a: vec![0.0; d], b_perp: vec![0.0; d], z: vec![0.0; d], inv_q: 0.0 }
    }
}

impl Frame {
    pub fn new(w: &DMatrix<f64>, center: &DVector<f64>, s: &DVector<f64>) -> Self {
        let d = center.len();
        let w_rm: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|ij| w[ij]).collect();
        let offset: Vec<f64> = (s - center).iter().copied().collect();
        let mut b = vec![0.0; d];
        matvec(&w_rm, &offset, &mut b);
        Self { d, w: w_rm, offset, b }
    }

    pub fn for_particle(p: &ParticleParams, rot: &DMatrix<f64>, t: f64, s: &DVector<f64>) -> Self {
        Self::new(&(&p.shape * rot.transpose()), &p.trajectory.at(t), s)
    }

    /// Ray transform along direction `delta = r - s` with `|delta| = delta_norm`.
    pub fn value(&self, delta: &[f64], delta_norm: f64) -> f64 {
        let mut a = [0.0f64; 8];
        let mut heap;
        let a: &mut [f64] = if self.d <= 8 {
            &mut a[..self.d]
        } else {
            heap = vec![0.0; self.d];
            &mut heap
        };
        matvec(&self.w, delta, a);
        let q = dot(a, a);
        let kappa = dot(a, &self.b) / q;
        // -|b - kappa a|^2 is the exponent, written without cancellation.
        let perp2: f64 = self.b.iter().zip(a.iter()).map(|(b, a)| (b - kappa * a).powi(2)).sum();
        SQRT_PI * delta_norm / q.sqrt() * (-perp2).exp()
    }

    /// Value plus the intermediate quantities needed for the gradient.
    pub fn value_with_partials(&self, delta: &[f64], delta_norm: f64, out: &mut Partials) {
        matvec(&self.w, delta, &mut out.a);
        let q = dot(&out.a, &out.a);
        let kappa = dot(&out.a, &self.b) / q;
        let mut perp2 = 0.0;
        for i in 0..self.d {
            let bp = self.b[i] - kappa * out.a[i];
            out.b_perp[i] = bp;
            perp2 += bp * bp;
            out.z[i] = kappa * delta[i] - self.offset[i];
        }
        out.inv_q = 1.0 / q;
        out.value = SQRT_PI * delta_norm / q.sqrt() * (-perp2).exp();
    }

    /// Accumulates `weight * dX/dW` (row-major) and `weight * dX/dcenter`
    /// using partials from [`Frame::value_with_partials`].
    pub fn accumulate_gradient(
        &self,
        delta: &[f64],
        p: &Partials,
        weight: f64,
        grad_w: &mut [f64],
        grad_center: &mut [f64],
    ) {
        let d = self.d;
        let scale = weight * p.value;
        if scale == 0.0 {
            return;
        }
        // dlogX/dW = -a delta^T / q + 2 b_perp z^T
        for i in 0..d {
            let ai = -p.a[i] * p.inv_q * scale;
            let bi = 2.0 * p.b_perp[i] * scale;
            let row = &mut grad_w[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += ai * delta[j] + bi * p.z[j];
            }
        }
        // dlogX/dcenter = 2 W^T b_perp
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                acc += self.w[i * d + j] * p.b_perp[i];
            }
            grad_center[j] += 2.0 * scale * acc;
        }
    }
}

/// Builds per-particle frames at time `t` for source `s`.
pub(crate) fn frames_at(scene: &Scene, s: &DVector<f64>, t: f64) -> Vec<Frame> {
    let d = scene.dim();
    scene
        .particles
        .iter()
        .map(|p| {
            let rot = rotation_matrix(&p.angular_velocity.scaled(t), d)
                .expect("validated rotation dimension");
            Frame::for_particle(p, &rot, t, s)
        })
        .collect()
}

fn check_scene_inputs(scene: &Scene, s: &DVector<f64>, r: &DVector<f64>) -> Result<f64> {
    scene.validate()?;
    let d = scene.dim();
    if s.len() != d || r.len() != d {
        return Err(Error::DimensionMismatch("source/detector dimension".into()));
    }
    let norm = (r - s).norm();
    if norm == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(norm)
}

/// Forward operator `F(s, r, t) = sum_n alpha_n X_n(s, r, t)`.
pub fn forward_operator(scene: &Scene, s: &DVector<f64>, r: &DVector<f64>, t: f64) -> Result<f64> {
    let delta_norm = check_scene_inputs(scene, s, r)?;
    let delta = r - s;
    let frames = frames_at(scene, s, t);
    Ok(sum_frames(scene, &frames, delta.as_slice(), delta_norm))
}

#[inline]
fn sum_frames(scene: &Scene, frames: &[Frame], delta: &[f64], delta_norm: f64) -> f64 {
    let mut f = 0.0;
    for (p, frame) in scene.particles.iter().zip(frames) {
        f += p.alpha * frame.value(delta, delta_norm);
    }
    f
}

/// Detector directions `r_m - s` and their norms for a geometry.
pub(crate) fn ray_directions(geom: &AcquisitionGeometry) -> Vec<(Vec<f64>, f64)> {
    geom.detector_positions()
        .into_iter()
        .map(|r| {
            let delta = r - &geom.source;
            let n = delta.norm();
            (delta.iter().copied().collect(), n)
        })
        .collect()
}

/// Noiseless sinogram of `scene` under `geom`, sampled pointwise at detector
/// positions.
pub fn simulate_sinogram(scene: &Scene, geom: &AcquisitionGeometry) -> Result<Sinogram> {
    use rayon::prelude::*;

    scene.validate()?;
    geom.validate()?;
    if scene.dim() != geom.dim() {
        return Err(Error::DimensionMismatch("scene and geometry dimension".into()));
    }
    let rays = ray_directions(geom);
    if rays.iter().any(|(_, n)| *n == 0.0) {
        return Err(Error::CoincidentPoints);
    }
    let columns: Vec<Vec<f64>> = (0..geom.num_times)
        .into_par_iter()
        .map(|m_t| {
            let frames = frames_at(scene, &geom.source, geom.time(m_t));
            rays.iter().map(|(delta, n)| sum_frames(scene, &frames, delta, *n)).collect()
        })
        .collect();
    Sinogram::from_values(columns.concat(), geom.clone())
}

/// Number of gradient entries per particle: alpha, shape entries, angular
/// velocity and velocity.
pub fn gradient_block_len(d: usize) -> usize {
    1 + shape_dim(d) + rotation_dim(d) + d
}

/// Chain rule from `dX/dW` and `dX/dcenter` at time `t` to the canonical
/// parameter block (without the attenuation slot).
pub(crate) struct ChainRule {
    d: usize,
    t: f64,
    rot: DMatrix<f64>,
    rot_jac: Vec<DMatrix<f64>>,
    shape: DMatrix<f64>,
}

impl ChainRule {
    pub fn new(p: &ParticleParams, t: f64) -> Self {
        let d = p.dim();
        let (rot, rot_jac) = rotation_matrix_with_jacobian(&p.angular_velocity.scaled(t), d)
            .expect("validated rotation dimension");
        Self { d, t, rot, rot_jac, shape: p.shape.clone() }
    }

    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rot
    }

    /// Writes `[dU (upper), dTheta, dv]` given row-major `grad_w` and
    /// `grad_center`, scaled by `scale`, adding into `out`.
    pub fn apply(&self, grad_w: &[f64], grad_center: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.d;
        let g = DMatrix::from_row_slice(d, d, grad_w);
        // W = U R^T  =>  dX/dU = G R
        let gu = &g * &self.rot;
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                out[k] += scale * gu[(i, j)];
                k += 1;
            }
        }
        // dW/dtheta_k = t U (dR/domega_k)^T
        for jac in &self.rot_jac {
            let dw = &self.shape * jac.transpose();
            out[k] += scale * self.t * g.dot(&dw);
            k += 1;
        }
        for j in 0..d {
            out[k] += scale * self.t * grad_center[j];
            k += 1;
        }
    }
}

/// Analytic gradient of `F(s, r, t)` with respect to every particle's
/// parameters, in canonical order per particle: `alpha`, row-major
/// upper-triangular `U` entries, `Theta`, `v`.
pub fn forward_gradients(scene: &Scene, s: &DVector<f64>, r: &DVector<f64>, t: f64) -> Result<Vec<f64>> {
    let delta_norm = check_scene_inputs(scene, s, r)?;
    let delta = r - s;
    let d = scene.dim();
    let block = gradient_block_len(d);
    let mut grad = vec![0.0; block * scene.len()];
    let mut partials = Partials::new(d);
    for (n, p) in scene.particles.iter().enumerate() {
        let chain = ChainRule::new(p, t);
        let frame = Frame::for_particle(p, chain.rotation(), t, s);
        frame.value_with_partials(delta.as_slice(), delta_norm, &mut partials);
        let mut gw = vec![0.0; d * d];
        let mut gc = vec![0.0; d];
        frame.accumulate_gradient(delta.as_slice(), &partials, 1.0, &mut gw, &mut gc);
        let out = &mut grad[n * block..(n + 1) * block];
        out[0] = partials.value;
        chain.apply(&gw, &gc, p.alpha, &mut out[1..]);
    }
    Ok(grad)
}

/// Flattens a scene's parameters in the gradient's canonical order.
pub fn canonical_parameters(scene: &Scene) -> Vec<f64> {
    let mut out = Vec::new();
    for p in &scene.particles {
        out.push(p.alpha);
        out.extend(p.shape_entries());
        out.extend(p.angular_velocity.0.iter());
        out.extend(p.trajectory.velocity.iter());
    }
    out
}

/// Inverse of [`canonical_parameters`]; positions and accelerations are
/// taken from `template`.
pub fn scene_from_canonical(template: &Scene, params: &[f64]) -> Scene {
    let d = template.dim();
    let block = gradient_block_len(d);
    let tri = upper_triangle(d);
    let particles = template
        .particles
        .iter()
        .enumerate()
        .map(|(n, p)| {
            let x = &params[n * block..(n + 1) * block];
            let mut shape = DMatrix::zeros(d, d);
            for (k, &(i, j)) in tri.iter().enumerate() {
                shape[(i, j)] = x[1 + k];
            }
            let off = 1 + tri.len();
            let rd = rotation_dim(d);
            ParticleParams {
                alpha: x[0],
                shape,
                angular_velocity: RotationParams::new(x[off..off + rd].to_vec()),
                trajectory: TrajectoryParams {
                    velocity: DVector::from_column_slice(&x[off + rd..off + rd + d]),
                    ..p.trajectory.clone()
                },
            }
        })
        .collect();
    Scene { particles }
}

/// Rendered density `alpha rho_0(U (x - c))` on a uniform grid; rows index the
/// second coordinate. Only meaningful for `d = 2`.
pub fn render_density(
    p: &ParticleParams,
    t: f64,
    lower: [f64; 2],
    upper: [f64; 2],
    resolution: usize,
) -> Vec<f64> {
    let (u_eff, center) = effective_gaussian(p, t);
    let step = |k: usize, lo: f64, hi: f64| {
        if resolution < 2 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * k as f64 / (resolution - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(resolution * resolution);
    for iy in 0..resolution {
        let y = step(iy, lower[1], upper[1]);
        for ix in 0..resolution {
            let x = step(ix, lower[0], upper[0]);
            let dx = x - center[0];
            let dy = y - center[1];
            let e0 = u_eff[(0, 0)] * dx + u_eff[(0, 1)] * dy;
            let e1 = u_eff[(1, 0)] * dx + u_eff[(1, 1)] * dy;
            out.push(p.alpha * (-(e0 * e0 + e1 * e1)).exp());
        }
    }
    out
}

/// `decay_lengths` divided by the smallest singular value of `U`: the radius
/// along the weakest axis at which the template has fallen to
/// `exp(-decay_lengths^2)`.
pub fn support_radius(shape: &DMatrix<f64>, decay_lengths: f64) -> f64 {
    let sv = shape.clone().svd(false, false).singular_values;
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    decay_lengths / smin
}
