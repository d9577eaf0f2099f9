//! Dynamic X-ray tomography of moving, rotating Gaussian particles.
//!
//! A scene is a sum of anisotropic Gaussian blobs, each following a quadratic
//! trajectory while spinning at a constant angular velocity. Reconstruction
//! runs in two stages: trajectories are recovered from the peaks of the
//! sinogram, then rotations, attenuations and shapes are fitted to the full
//! data with the trajectories held fixed.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod modes;
pub mod optim;
pub mod serde_util;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
pub use geometry::{AcquisitionGeometry, RotationParams, TrajectoryParams};
pub use model::{ParticleParams, Scene, Sinogram};
