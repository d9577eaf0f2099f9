use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionGeometry, RotationParams, TrajectoryParams};
use crate::model::{ParticleParams, Scene};
use crate::modes::PeakConfig;
use crate::optim::rng::{standard_normal, stream_rng, uniform};
use crate::stage1::{KnownMotion, Stage1Config};
use crate::stage2::Stage2Config;

/// Sampling model for synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Particle `n` (from 0) has attenuation mean `alpha_base + n * alpha_step`.
    pub alpha_base: f64,
    pub alpha_step: f64,
    pub alpha_std: f64,
    pub diag_low: f64,
    pub diag_high: f64,
    pub offdiag_mean: f64,
    pub offdiag_std: f64,
    /// Minimum ratio of largest to smallest diagonal entry of `U`.
    pub anisotropy_floor: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    /// Reject an angular velocity when the rotation per projection,
    /// `Theta * dt`, lies within `guard_band_fraction * pi` of a nonzero
    /// integer multiple of `pi`.
    pub guard_band_fraction: f64,
    #[serde(with = "crate::serde_util::vector")]
    pub position: DVector<f64>,
    #[serde(with = "crate::serde_util::vector")]
    pub acceleration: DVector<f64>,
    /// One velocity per particle; the first component must be positive.
    pub velocities: Vec<Vec<f64>>,
    pub rejection_budget: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            alpha_base: 15.0,
            alpha_step: 5.0,
            alpha_std: 1.0,
            diag_low: 7.5,
            diag_high: 25.5,
            offdiag_mean: 10.0,
            offdiag_std: 1.0,
            anisotropy_floor: 1.5,
            omega_min: 2.0,
            omega_max: 6.0,
            guard_band_fraction: 0.1,
            position: DVector::from_vec(vec![1.0, 1.0]),
            acceleration: DVector::from_vec(vec![0.0, -9.81]),
            velocities: vec![vec![1.0, 3.0], vec![1.5, 1.8], vec![0.8, 2.5], vec![0.75, 1.2], vec![2.0, 3.0]],
            rejection_budget: 10_000,
        }
    }
}

impl GenerationConfig {
    /// The rejection predicate for angular velocities.
    pub fn in_guard_band(&self, omega: f64, dt: f64) -> bool {
        let phase = omega * dt;
        let k = (phase / PI).round();
        k != 0.0 && (phase - k * PI).abs() < self.guard_band_fraction * PI
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub geometry: AcquisitionGeometry,
    pub n_particles: usize,
    #[serde(default)]
    pub generation: GenerationConfig,
    /// Fixed ground truth; when present it replaces sampling.
    #[serde(default)]
    pub scene: Option<Scene>,
    #[serde(default)]
    pub peaks: PeakConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub note: Option<String>,
}

impl ExperimentConfig {
    /// Five-particle experiment with the listed ground truth and default hyperparameters.
    pub fn five_particle() -> Self {
        Self {
            geometry: default_geometry(),
            n_particles: 5,
            generation: GenerationConfig::default(),
            scene: Some(five_particle_scene()),
            peaks: PeakConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            seed: 0,
            note: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let d = self.geometry.dim();
        if self.n_particles == 0 {
            return Err(Error::InvalidConfig("n_particles must be positive".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.init_mean.len() != d {
            return Err(Error::InvalidConfig("stage1.init_mean has the wrong dimension".into()));
        }
        match &self.scene {
            Some(scene) => {
                scene.validate()?;
                if scene.len() != self.n_particles || scene.dim() != d {
                    return Err(Error::InvalidConfig("fixed scene does not match n_particles or dimension".into()));
                }
            }
            None => {
                let g = &self.generation;
                if g.velocities.len() != self.n_particles {
                    return Err(Error::InvalidConfig(format!(
                        "{} velocities listed for {} particles",
                        g.velocities.len(),
                        self.n_particles
                    )));
                }
                if g.velocities.iter().any(|v| v.len() != d || !(v[0] > 0.0)) {
                    return Err(Error::InvalidConfig("velocities need dimension d and a positive first component".into()));
                }
                if g.position.len() != d || g.acceleration.len() != d {
                    return Err(Error::InvalidConfig("generation position/acceleration dimension".into()));
                }
                if !(g.diag_low > 0.0 && g.diag_low < g.diag_high && g.omega_min < g.omega_max && g.alpha_std >= 0.0) {
                    return Err(Error::InvalidConfig("generation bounds".into()));
                }
            }
        }
        Ok(())
    }

    /// Known initial position and acceleration shared by all particles.
    pub fn known_motion(&self) -> KnownMotion {
        match &self.scene {
            Some(s) => KnownMotion {
                position: s.particles[0].trajectory.position.clone(),
                acceleration: s.particles[0].trajectory.acceleration.clone(),
            },
            None => KnownMotion {
                position: self.generation.position.clone(),
                acceleration: self.generation.acceleration.clone(),
            },
        }
    }

    /// Ground truth: the fixed scene if given, otherwise a sampled one.
    pub fn truth(&self) -> Result<Scene> {
        match &self.scene {
            Some(s) => Ok(s.clone()),
            None => generate_scene(self, self.seed),
        }
    }
}

pub fn default_geometry() -> AcquisitionGeometry {
    AcquisitionGeometry::new(
        DVector::from_vec(vec![-1.0, 1.0]),
        DVector::from_vec(vec![4.0, 1.0]),
        DVector::from_vec(vec![4.0, -3.0]),
        128,
        (0.0, 1.5),
        150,
    )
    .expect("default geometry is valid")
}

/// The five-particle ground truth used for the reference reconstruction.
pub fn five_particle_scene() -> Scene {
    let rows: [(f64, [f64; 3], f64, [f64; 2]); 5] = [
        (15.0447, [10.2751, 10.3696, 17.9620], 5.9297, [1.0, 3.0]),
        (21.9112, [21.3949, 11.3376, 7.7181], 5.1986, [1.5, 1.8]),
        (24.7690, [24.0554, 11.2340, 14.9712], 5.0637, [0.8, 2.5]),
        (30.3459, [12.1598, 9.2022, 25.2080], 5.9312, [0.75, 1.2]),
        (36.3180, [8.5057, 12.9073, 24.6596], 5.4526, [2.0, 3.0]),
    ];
    let particles = rows
        .iter()
        .map(|(alpha, u, theta, v)| ParticleParams {
            alpha: *alpha,
            shape: DMatrix::from_row_slice(2, 2, &[u[0], u[1], 0.0, u[2]]),
            angular_velocity: RotationParams::new(vec![*theta]),
            trajectory: TrajectoryParams::new(
                DVector::from_vec(vec![1.0, 1.0]),
                DVector::from_column_slice(v),
                DVector::from_vec(vec![0.0, -9.81]),
            ),
        })
        .collect();
    Scene::new(particles).expect("reference scene is valid")
}

fn sample_until<R: Rng, T>(
    rng: &mut R,
    budget: usize,
    what: &str,
    mut draw: impl FnMut(&mut R) -> Option<T>,
) -> Result<T> {
    for _ in 0..=budget {
        if let Some(x) = draw(rng) {
            return Ok(x);
        }
    }
    Err(Error::RejectionBudgetExhausted { what: what.into() })
}

/// Samples a scene from the generation model. Deterministic per seed.
pub fn generate_scene(cfg: &ExperimentConfig, seed: u64) -> Result<Scene> {
    let g = &cfg.generation;
    let d = cfg.geometry.dim();
    if g.velocities.len() != cfg.n_particles {
        return Err(Error::InvalidConfig("velocity list length differs from n_particles".into()));
    }
    let dt = cfg.geometry.time_step();
    let mut rng = stream_rng(seed, 0);
    let budget = g.rejection_budget;
    let mut particles = Vec::with_capacity(cfg.n_particles);
    for (n, vel) in g.velocities.iter().enumerate() {
        if vel.len() != d || !(vel[0] > 0.0) {
            return Err(Error::InvalidConfig(format!("velocity {n} must have dimension {d} and a positive first component")));
        }
        let mean = g.alpha_base + g.alpha_step * n as f64;
        let alpha = sample_until(&mut rng, budget, "attenuation", |r| {
            let a = mean + g.alpha_std * standard_normal(r);
            (a > 0.0).then_some(a)
        })?;
        let shape = sample_until(&mut rng, budget, "shape", |r| {
            let mut u = DMatrix::zeros(d, d);
            for i in 0..d {
                u[(i, i)] = uniform(r, g.diag_low, g.diag_high);
                for j in i + 1..d {
                    u[(i, j)] = g.offdiag_mean + g.offdiag_std * standard_normal(r);
                }
            }
            let diag: Vec<f64> = (0..d).map(|i| u[(i, i)]).collect();
            let ratio = diag.iter().copied().fold(0.0, f64::max) / diag.iter().copied().fold(f64::INFINITY, f64::min);
            (ratio >= g.anisotropy_floor).then_some(u)
        })?;
        let omega = (0..crate::geometry::rotation_dim(d))
            .map(|_| {
                sample_until(&mut rng, budget, "angular velocity", |r| {
                    let w = uniform(r, g.omega_min, g.omega_max);
                    (!g.in_guard_band(w, dt)).then_some(w)
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        particles.push(ParticleParams {
            alpha,
            shape,
            angular_velocity: RotationParams::new(omega),
            trajectory: TrajectoryParams::new(g.position.clone(), DVector::from_column_slice(vel), g.acceleration.clone()),
        });
    }
    Scene::new(particles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampled() -> ExperimentConfig {
        ExperimentConfig { scene: None, ..ExperimentConfig::five_particle() }
    }

    #[test]
    fn generated_scenes_satisfy_constraints() {
        let cfg = sampled();
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert_eq!(s.len(), 5);
            for (p, v) in s.particles.iter().zip(&cfg.generation.velocities) {
                assert!(p.alpha > 0.0);
                let ratio = (p.shape[(0, 0)] / p.shape[(1, 1)]).max(p.shape[(1, 1)] / p.shape[(0, 0)]);
                assert!(ratio >= 1.5);
                assert!((2.0..=6.0).contains(&p.angular_velocity.0[0]));
                assert_eq!(p.trajectory.velocity.as_slice(), v.as_slice());
            }
        }
        assert_eq!(generate_scene(&cfg, 3).unwrap(), generate_scene(&cfg, 3).unwrap());
    }

    #[test]
    fn infeasible_floor_exhausts_budget() {
        let mut cfg = sampled();
        cfg.generation.anisotropy_floor = 10.0;
        cfg.generation.rejection_budget = 100;
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::RejectionBudgetExhausted { .. })));
    }

    #[test]
    fn guard_band_predicate() {
        let g = GenerationConfig::default();
        let dt = 1.5 / 149.0;
        assert!(!g.in_guard_band(4.0, dt));
        assert!(g.in_guard_band(PI / dt, dt));
        assert!(g.in_guard_band(1.05 * PI / dt, dt));
        assert!(!g.in_guard_band(1.2 * PI / dt, dt));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::five_particle();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        back.validate().unwrap();
    }
}
