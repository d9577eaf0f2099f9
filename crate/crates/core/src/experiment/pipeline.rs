use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ExperimentConfig;
use super::io::{read_json, read_sinogram, write_json, write_sinogram};
use super::metrics::{match_particles, metrics_report, parameter_table, MetricsReport};
use crate::error::Error as CoreError;
use crate::model::{simulate_sinogram, Scene, Sinogram};
use crate::modes::{detect_modes, ModeSet, PeakConfig};
use crate::optim::rng::derive_seed;
use crate::stage1::{optimize_trajectories, TrajectoryEstimate};
use crate::stage2::{optimize_morphology, MorphologyEstimate};

pub const CONFIG_FILE: &str = "config.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const SINOGRAM_FILE: &str = "sinogram.txt";
pub const MODES_FILE: &str = "modes.tsv";
pub const TRAJECTORIES_FILE: &str = "trajectories.json";
pub const STAGE1_TRACE_FILE: &str = "stage1_trace.tsv";
pub const MORPHOLOGY_FILE: &str = "morphology.json";
pub const STAGE2_TRACE_FILE: &str = "stage2_trace.tsv";
pub const ESTIMATE_FILE: &str = "estimate.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PARAMETERS_FILE: &str = "parameters.tsv";

const ALL_FILES: [&str; 11] = [
    CONFIG_FILE,
    TRUTH_FILE,
    SINOGRAM_FILE,
    MODES_FILE,
    TRAJECTORIES_FILE,
    STAGE1_TRACE_FILE,
    MORPHOLOGY_FILE,
    STAGE2_TRACE_FILE,
    ESTIMATE_FILE,
    METRICS_FILE,
    PARAMETERS_FILE,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSelection {
    /// Trajectories only.
    One,
    /// Morphology only, from trajectories already in the output directory.
    Two,
    All,
}

/// Failure tagged with the pipeline phase it came from.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(#[source] CoreError),
    #[error("stage 1 failed: {0}")]
    Stage1(#[source] CoreError),
    #[error("stage 2 failed: {0}")]
    Stage2(#[source] CoreError),
    #[error("i/o error: {0}")]
    Io(#[source] CoreError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Stage1(_) => 3,
            Self::Stage2(_) => 4,
            Self::Io(_) => 5,
        }
    }
}

fn io_err(e: impl Into<CoreError>) -> PipelineError {
    PipelineError::Io(e.into())
}

/// In-memory result of a reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub modes: ModeSet,
    pub trajectories: TrajectoryEstimate,
    pub morphology: Option<MorphologyEstimate>,
}

impl Reconstruction {
    pub fn estimate(&self) -> Option<Scene> {
        self.morphology.as_ref().map(MorphologyEstimate::scene)
    }
}

impl ExperimentConfig {
    /// Sets the master seed and derives the per-stage seeds from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stage1.seed = derive_seed(seed, 1);
        self.stage2.seed = derive_seed(seed, 2);
        self
    }

    fn effective_peaks(&self) -> PeakConfig {
        PeakConfig { max_peaks: Some(self.peaks.max_peaks.unwrap_or(self.n_particles)), ..self.peaks.clone() }
    }
}

pub fn run_stage1(cfg: &ExperimentConfig, data: &Sinogram) -> Result<(ModeSet, TrajectoryEstimate), PipelineError> {
    let modes = detect_modes(data, &cfg.effective_peaks());
    if modes.is_empty() {
        return Err(PipelineError::Stage1(CoreError::NoObservations));
    }
    let est = optimize_trajectories(&modes, data.geometry(), &cfg.known_motion(), &cfg.stage1, cfg.n_particles)
        .map_err(PipelineError::Stage1)?;
    if est.warning {
        log::warn!("trajectory refinement flagged a large mode residual: {:?}", est.residuals);
    }
    Ok((modes, est))
}

pub fn run_stage2(
    cfg: &ExperimentConfig,
    data: &Sinogram,
    trajectories: &TrajectoryEstimate,
) -> Result<MorphologyEstimate, PipelineError> {
    optimize_morphology(&trajectories.etas, data, &cfg.stage2).map_err(PipelineError::Stage2)
}

/// Runs both stages on `data` without touching the file system.
pub fn reconstruct(cfg: &ExperimentConfig, data: &Sinogram) -> Result<Reconstruction, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    let (modes, trajectories) = run_stage1(cfg, data)?;
    let morphology = Some(run_stage2(cfg, data, &trajectories)?);
    Ok(Reconstruction { modes, trajectories, morphology })
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub out: PathBuf,
    pub stage: StageSelection,
    pub force: bool,
    /// Reconstruct from this sinogram instead of simulating one.
    pub sinogram: Option<PathBuf>,
    /// Ground truth used for metrics when reconstructing from a file.
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub truth: Option<Scene>,
    pub sinogram: Sinogram,
    pub modes: Option<ModeSet>,
    pub trajectories: Option<TrajectoryEstimate>,
    pub morphology: Option<MorphologyEstimate>,
    pub metrics: Option<MetricsReport>,
}

/// Creates `out`, refusing to reuse a non-empty directory unless `force`.
/// With `force`, stale artifacts from earlier runs are removed; other files are left alone.
pub fn prepare_output_dir(out: &Path, force: bool) -> Result<(), PipelineError> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(io_err)?.next().is_some();
        if non_empty && !force {
            return Err(PipelineError::Io(CoreError::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("output directory {} exists; pass --force to overwrite", out.display()),
            ))));
        }
        for name in ALL_FILES {
            let p = out.join(name);
            if p.exists() {
                fs::remove_file(&p).map_err(io_err)?;
            }
        }
    }
    fs::create_dir_all(out).map_err(io_err)
}

/// Simulates the configured ground truth and writes config, truth and sinogram.
pub fn simulate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<(Scene, Sinogram), PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    let truth = cfg.truth().map_err(PipelineError::Config)?;
    let data = simulate_sinogram(&truth, &cfg.geometry).map_err(PipelineError::Config)?;
    prepare_output_dir(out, force)?;
    write_json(&out.join(CONFIG_FILE), cfg).map_err(io_err)?;
    write_json(&out.join(TRUTH_FILE), &truth).map_err(io_err)?;
    write_sinogram(&out.join(SINOGRAM_FILE), &data).map_err(io_err)?;
    Ok((truth, data))
}

fn write_stage1(out: &Path, modes: &ModeSet, est: &TrajectoryEstimate) -> Result<(), PipelineError> {
    fs::write(out.join(MODES_FILE), modes.to_tsv()).map_err(io_err)?;
    write_json(&out.join(TRAJECTORIES_FILE), est).map_err(io_err)?;
    fs::write(out.join(STAGE1_TRACE_FILE), est.trace_tsv()).map_err(io_err)
}

fn write_stage2(
    out: &Path,
    cfg: &ExperimentConfig,
    truth: Option<&Scene>,
    morph: &MorphologyEstimate,
) -> Result<Option<MetricsReport>, PipelineError> {
    write_json(&out.join(MORPHOLOGY_FILE), morph).map_err(io_err)?;
    fs::write(out.join(STAGE2_TRACE_FILE), morph.trace_tsv()).map_err(io_err)?;
    let estimate = morph.scene();
    write_json(&out.join(ESTIMATE_FILE), &estimate).map_err(io_err)?;
    let times = cfg.geometry.times();
    let Some(truth) = truth else {
        fs::write(out.join(PARAMETERS_FILE), parameter_table(None, &estimate, &[])).map_err(io_err)?;
        return Ok(None);
    };
    let report = metrics_report(truth, &estimate, &times, 256).map_err(PipelineError::Config)?;
    let pairs = match_particles(truth, &estimate, &times).map_err(PipelineError::Config)?;
    write_json(&out.join(METRICS_FILE), &report).map_err(io_err)?;
    fs::write(out.join(PARAMETERS_FILE), parameter_table(Some(truth), &estimate, &pairs)).map_err(io_err)?;
    Ok(Some(report))
}

/// Simulate (or load) data, then run the selected stages, writing every
/// artifact to `opts.out` as soon as it is available.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &PipelineOptions) -> Result<PipelineOutput, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    let out = opts.out.as_path();

    if opts.stage == StageSelection::Two {
        // Continue from a stage-1 run in the same directory.
        if !out.join(TRAJECTORIES_FILE).exists() {
            return Err(io_err(CoreError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} has no stage-1 output", out.display()),
            ))));
        }
        if out.join(MORPHOLOGY_FILE).exists() && !opts.force {
            return Err(io_err(CoreError::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "stage-2 output exists; pass --force to overwrite",
            ))));
        }
        let data = read_sinogram(&out.join(SINOGRAM_FILE)).map_err(io_err)?;
        let trajectories: TrajectoryEstimate = read_json(&out.join(TRAJECTORIES_FILE)).map_err(io_err)?;
        let truth = load_truth(opts, out)?;
        let morph = run_stage2(cfg, &data, &trajectories)?;
        let metrics = write_stage2(out, cfg, truth.as_ref(), &morph)?;
        return Ok(PipelineOutput {
            truth,
            sinogram: data,
            modes: None,
            trajectories: Some(trajectories),
            morphology: Some(morph),
            metrics,
        });
    }

    let (truth, data) = match &opts.sinogram {
        Some(path) => {
            let data = read_sinogram(path).map_err(io_err)?;
            let truth = load_truth(opts, out)?;
            prepare_output_dir(out, opts.force)?;
            write_json(&out.join(CONFIG_FILE), cfg).map_err(io_err)?;
            if let Some(t) = &truth {
                write_json(&out.join(TRUTH_FILE), t).map_err(io_err)?;
            }
            write_sinogram(&out.join(SINOGRAM_FILE), &data).map_err(io_err)?;
            (truth, data)
        }
        None => {
            let (truth, data) = simulate(cfg, out, opts.force)?;
            (Some(truth), data)
        }
    };
    if data.geometry() != &cfg.geometry {
        log::warn!("sinogram geometry differs from the configured geometry; using the sinogram's");
    }

    let (modes, trajectories) = run_stage1(cfg, &data)?;
    write_stage1(out, &modes, &trajectories)?;
    let (morphology, metrics) = if opts.stage == StageSelection::All {
        let morph = run_stage2(cfg, &data, &trajectories)?;
        let metrics = write_stage2(out, cfg, truth.as_ref(), &morph)?;
        (Some(morph), metrics)
    } else {
        (None, None)
    };
    Ok(PipelineOutput { truth, sinogram: data, modes: Some(modes), trajectories: Some(trajectories), morphology, metrics })
}

fn load_truth(opts: &PipelineOptions, out: &Path) -> Result<Option<Scene>, PipelineError> {
    match &opts.truth {
        Some(p) => Ok(Some(read_json(p).map_err(io_err)?)),
        None if opts.sinogram.is_none() && out.join(TRUTH_FILE).exists() => {
            Ok(Some(read_json(&out.join(TRUTH_FILE)).map_err(io_err)?))
        }
        None => Ok(None),
    }
}

/// Recomputes metrics for the estimate stored in `out` against `truth`.
pub fn report(out: &Path, truth: &Scene) -> Result<MetricsReport, PipelineError> {
    let estimate: Scene = read_json(&out.join(ESTIMATE_FILE)).map_err(io_err)?;
    let cfg: ExperimentConfig = read_json(&out.join(CONFIG_FILE)).map_err(io_err)?;
    metrics_report(truth, &estimate, &cfg.geometry.times(), 256).map_err(PipelineError::Config)
}
