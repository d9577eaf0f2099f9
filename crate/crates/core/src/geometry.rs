//! Acquisition geometry, rotation parameterization and projectile trajectories.
//!
//! Rotations in `d` dimensions are parameterized by `d(d-1)/2` planar angles.
//! The rotation is the ordered product of Givens factors, one per coordinate
//! plane `(i, j)` with `i < j`, taken in lexicographic plane order with the
//! first plane as the leftmost factor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_util;

/// Number of rotation parameters in dimension `d`.
pub fn rotation_dim(d: usize) -> usize {
    d * (d.saturating_sub(1)) / 2
}

/// Coordinate planes `(i, j)`, `i < j`, in factor order.
pub fn rotation_planes(d: usize) -> Vec<(usize, usize)> {
    let mut planes = Vec::with_capacity(rotation_dim(d));
    for i in 0..d {
        for j in (i + 1)..d {
            planes.push((i, j));
        }
    }
    planes
}

/// Planar angles (or angular rates) parameterizing a rotation in SO(d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RotationParams(#[serde(with = "serde_util::vector")] pub DVector<f64>);

impl RotationParams {
    pub fn new(omega: impl Into<Vec<f64>>) -> Self {
        Self(DVector::from_vec(omega.into()))
    }

    pub fn zeros(d: usize) -> Self {
        Self(DVector::zeros(rotation_dim(d)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    /// The angles `t * self`.
    pub fn scaled(&self, t: f64) -> Self {
        Self(&self.0 * t)
    }
}

fn givens(d: usize, plane: (usize, usize), angle: f64) -> DMatrix<f64> {
    let (i, j) = plane;
    let (s, c) = angle.sin_cos();
    let mut g = DMatrix::identity(d, d);
    g[(i, i)] = c;
    g[(i, j)] = -s;
    g[(j, i)] = s;
    g[(j, j)] = c;
    g
}

fn givens_derivative(d: usize, plane: (usize, usize), angle: f64) -> DMatrix<f64> {
    let (i, j) = plane;
    let (s, c) = angle.sin_cos();
    let mut g = DMatrix::zeros(d, d);
    g[(i, i)] = -s;
    g[(i, j)] = -c;
    g[(j, i)] = c;
    g[(j, j)] = -s;
    g
}

fn check_rotation_len(omega: &RotationParams, d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::DimensionMismatch(format!("dimension must be >= 2, got {d}")));
    }
    if omega.len() != rotation_dim(d) {
        return Err(Error::DimensionMismatch(format!(
            "rotation parameters have length {}, expected {} for d = {d}",
            omega.len(),
            rotation_dim(d)
        )));
    }
    Ok(())
}

/// The rotation matrix `R(omega)` as the ordered product of planar rotations.
pub fn rotation_matrix(omega: &RotationParams, d: usize) -> Result<DMatrix<f64>> {
    check_rotation_len(omega, d)?;
    let mut r = DMatrix::identity(d, d);
    for (k, &plane) in rotation_planes(d).iter().enumerate() {
        r *= givens(d, plane, omega.0[k]);
    }
    Ok(r)
}

/// The rotation matrix together with its partial derivatives with respect to
/// each planar angle.
pub fn rotation_matrix_with_jacobian(
    omega: &RotationParams,
    d: usize,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    check_rotation_len(omega, d)?;
    let planes = rotation_planes(d);
    let k = planes.len();
    let factors: Vec<DMatrix<f64>> = planes
        .iter()
        .enumerate()
        .map(|(i, &p)| givens(d, p, omega.0[i]))
        .collect();

    // prefix[i] = G_0 ... G_{i-1}, suffix[i] = G_i ... G_{k-1}
    let mut prefix = Vec::with_capacity(k + 1);
    prefix.push(DMatrix::identity(d, d));
    for f in &factors {
        let next = prefix.last().unwrap() * f;
        prefix.push(next);
    }
    let mut suffix = vec![DMatrix::identity(d, d); k + 1];
    for i in (0..k).rev() {
        suffix[i] = &factors[i] * &suffix[i + 1];
    }

    let jac = planes
        .iter()
        .enumerate()
        .map(|(i, &p)| &prefix[i] * givens_derivative(d, p, omega.0[i]) * &suffix[i + 1])
        .collect();
    Ok((prefix.pop().unwrap(), jac))
}

/// Projectile motion parameters: initial position, velocity and acceleration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    #[serde(with = "serde_util::vector")]
    pub position: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub velocity: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub acceleration: DVector<f64>,
}

impl TrajectoryParams {
    pub fn new(position: DVector<f64>, velocity: DVector<f64>, acceleration: DVector<f64>) -> Self {
        Self { position, velocity, acceleration }
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    /// `C(t) = mu + t v + t^2/2 a`
    pub fn at(&self, t: f64) -> DVector<f64> {
        trajectory(self, t)
    }

    pub fn check_dims(&self) -> Result<()> {
        let d = self.position.len();
        if self.velocity.len() != d || self.acceleration.len() != d {
            return Err(Error::DimensionMismatch(
                "trajectory position, velocity and acceleration differ in length".into(),
            ));
        }
        Ok(())
    }
}

/// Position on the quadratic trajectory at time `t`.
pub fn trajectory(eta: &TrajectoryParams, t: f64) -> DVector<f64> {
    &eta.position + &eta.velocity * t + &eta.acceleration * (0.5 * t * t)
}

/// Outcome of the parameter-counting check between unknowns and measurements.
///
/// Satisfying it is necessary but not sufficient for a well-posed
/// reconstruction: a single view of a single particle passes the count yet
/// cannot be inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimensionCheck {
    pub satisfied: bool,
    pub min_num_times: usize,
}

/// Checks `(2d+1) M_s M_r M_t >= (d^2+3d+1) N` and reports the smallest `M_t`
/// that satisfies it.
pub fn dimension_criterion(
    d: usize,
    n_particles: usize,
    n_sources: usize,
    n_detectors: usize,
    n_times: usize,
) -> DimensionCheck {
    let unknowns = (d * d + 3 * d + 1) * n_particles;
    let per_time = (2 * d + 1) * n_sources * n_detectors;
    let min_num_times = if per_time == 0 { usize::MAX } else { unknowns.div_ceil(per_time).max(1) };
    DimensionCheck {
        satisfied: per_time.saturating_mul(n_times) >= unknowns,
        min_num_times,
    }
}

/// Fixed single source, a straight detector segment and a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    #[serde(with = "serde_util::vector")]
    pub source: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub detector_start: DVector<f64>,
    #[serde(with = "serde_util::vector")]
    pub detector_end: DVector<f64>,
    pub num_detectors: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub num_times: usize,
    #[serde(default)]
    pub fixed_component_index: usize,
}

impl AcquisitionGeometry {
    pub fn new(
        source: DVector<f64>,
        detector_start: DVector<f64>,
        detector_end: DVector<f64>,
        num_detectors: usize,
        (t_min, t_max): (f64, f64),
        num_times: usize,
    ) -> Result<Self> {
        let geom = Self {
            source,
            detector_start,
            detector_end,
            num_detectors,
            t_min,
            t_max,
            num_times,
            fixed_component_index: 0,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn with_fixed_component(mut self, index: usize) -> Result<Self> {
        self.fixed_component_index = index;
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.source.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d < 2 {
            return Err(Error::InvalidGeometry(format!("dimension must be >= 2, got {d}")));
        }
        if self.detector_start.len() != d || self.detector_end.len() != d {
            return Err(Error::DimensionMismatch(
                "source and detector endpoints differ in dimension".into(),
            ));
        }
        if self.num_detectors == 0 || self.num_times == 0 {
            return Err(Error::InvalidGeometry(
                "detector and time counts must be positive".into(),
            ));
        }
        let all_finite = self
            .source
            .iter()
            .chain(self.detector_start.iter())
            .chain(self.detector_end.iter())
            .chain([self.t_min, self.t_max].iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidGeometry("non-finite geometry value".into()));
        }
        if self.t_max < self.t_min || (self.num_times > 1 && self.t_max == self.t_min) {
            return Err(Error::InvalidGeometry("time window is empty or reversed".into()));
        }
        if self.num_detectors > 1 && self.detector_start == self.detector_end {
            return Err(Error::InvalidGeometry("detector segment has zero length".into()));
        }
        let k = self.fixed_component_index;
        if k >= d {
            return Err(Error::InvalidGeometry(format!(
                "fixed component index {k} out of range for d = {d}"
            )));
        }
        let plane = self.detector_start[k];
        let scale = 1.0 + plane.abs();
        if (self.detector_end[k] - plane).abs() > 1e-12 * scale {
            return Err(Error::InvalidGeometry(format!(
                "detector must lie in a hyperplane of constant coordinate {k}"
            )));
        }
        if (self.source[k] - plane).abs() <= 1e-12 * scale {
            return Err(Error::InvalidGeometry(
                "source lies in the detector hyperplane".into(),
            ));
        }
        Ok(())
    }

    /// Coordinate of the detector hyperplane along the fixed component.
    pub fn detector_plane(&self) -> f64 {
        self.detector_start[self.fixed_component_index]
    }

    /// Displacement between consecutive detector elements.
    pub fn detector_step(&self) -> DVector<f64> {
        if self.num_detectors < 2 {
            DVector::zeros(self.dim())
        } else {
            (&self.detector_end - &self.detector_start) / (self.num_detectors - 1) as f64
        }
    }

    pub fn detector_pitch(&self) -> f64 {
        self.detector_step().norm()
    }

    /// Position of detector element `m`, interpolating between the endpoints.
    pub fn detector_position(&self, m: usize) -> DVector<f64> {
        self.detector_position_at(m as f64)
    }

    /// Position at a fractional detector index.
    pub fn detector_position_at(&self, index: f64) -> DVector<f64> {
        if self.num_detectors < 2 {
            return self.detector_start.clone();
        }
        let u = index / (self.num_detectors - 1) as f64;
        &self.detector_start * (1.0 - u) + &self.detector_end * u
    }

    pub fn detector_positions(&self) -> Vec<DVector<f64>> {
        (0..self.num_detectors).map(|m| self.detector_position(m)).collect()
    }

    pub fn time_step(&self) -> f64 {
        if self.num_times < 2 {
            0.0
        } else {
            (self.t_max - self.t_min) / (self.num_times - 1) as f64
        }
    }

    pub fn time(&self, m: usize) -> f64 {
        if self.num_times < 2 {
            return self.t_min;
        }
        let u = m as f64 / (self.num_times - 1) as f64;
        self.t_min * (1.0 - u) + self.t_max * u
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.num_times).map(|m| self.time(m)).collect()
    }

    /// Index of the time sample nearest to `t`.
    pub fn nearest_time_index(&self, t: f64) -> usize {
        if self.num_times < 2 {
            return 0;
        }
        let idx = ((t - self.t_min) / self.time_step()).round();
        idx.clamp(0.0, (self.num_times - 1) as f64) as usize
    }
}
