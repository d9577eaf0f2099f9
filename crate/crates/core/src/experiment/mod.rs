//! Experiment harness: configuration, synthetic scenes, file formats,
//! orchestration and accuracy metrics.

pub mod config;
pub mod gradients;
pub mod io;
pub mod metrics;
pub mod pipeline;

pub use config::{default_geometry, generate_scene, five_particle_scene, ExperimentConfig, GenerationConfig};
pub use gradients::audit_gradients;
pub use metrics::{match_particles, metrics_report, MetricsReport, ParticleMetrics};
pub use pipeline::{reconstruct, run_pipeline, simulate, PipelineError, PipelineOptions, PipelineOutput, Reconstruction, StageSelection};
