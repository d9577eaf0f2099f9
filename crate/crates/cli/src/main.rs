use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmmct::experiment::io::{read_json, write_json};
use gmmct::experiment::pipeline::{self, METRICS_FILE, TRUTH_FILE};
use gmmct::experiment::{
    audit_gradients, ExperimentConfig, MetricsReport, PipelineError, PipelineOptions, StageSelection,
};
use gmmct::{Error as CoreError, Scene};

#[derive(Parser)]
#[command(name = "gmmct", version, about = "Simulate and reconstruct moving Gaussian particles from dynamic tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground truth and its sinogram.
    Simulate(Common),
    /// Reconstruct from a sinogram file.
    Reconstruct(Reconstruct),
    /// Simulate and reconstruct in one go.
    Run(Run),
    /// Compare analytic and finite-difference gradients of the morphology loss.
    CheckGradients(CheckGradients),
    /// Recompute metrics for an existing output directory.
    Report(Report),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults to the built-in five-particle experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configured one.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

impl From<Stage> for StageSelection {
    fn from(s: Stage) -> Self {
        match s {
            Stage::One => StageSelection::One,
            Stage::Two => StageSelection::Two,
            Stage::All => StageSelection::All,
        }
    }
}

#[derive(Args)]
struct Reconstruct {
    #[command(flatten)]
    common: Common,
    /// Sinogram to reconstruct; not needed with `--stage 2`.
    #[arg(long)]
    sinogram: Option<PathBuf>,
    /// Ground truth for metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    stage: Stage,
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "all")]
    stage: Stage,
}

#[derive(Args)]
struct CheckGradients {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random perturbations of the ground truth.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Relative perturbation size.
    #[arg(long, default_value_t = 0.02)]
    scale: f64,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    out: PathBuf,
    /// Ground truth; defaults to the one stored in the output directory.
    #[arg(long)]
    truth: Option<PathBuf>,
}

fn core_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Io(_) => 5,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, u8> {
    let cfg = match path {
        Some(p) => read_json::<ExperimentConfig>(p).map_err(|e| {
            log::error!("cannot load config {}: {e}", p.display());
            core_code(&e)
        })?,
        None => ExperimentConfig::five_particle().with_seed(0),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate().map_err(|e| {
        log::error!("invalid config: {e}");
        2
    })?;
    Ok(cfg)
}

fn fail(e: PipelineError) -> u8 {
    log::error!("{e}");
    e.exit_code() as u8
}

fn print_metrics(report: &MetricsReport) {
    println!("particle\tvelocity\ttheta\talpha_rel\tprecision_rel\trender");
    for p in &report.particles {
        println!(
            "{}\t{:.3e}\t{:.3e}\t{:.3e}\t{:.3e}\t{:.3e}",
            p.truth_index + 1,
            p.velocity_error,
            p.theta_error,
            p.alpha_rel_error,
            p.precision_rel_error,
            p.render_max_abs_error
        );
    }
}

fn run_with(cfg: &ExperimentConfig, opts: &PipelineOptions) -> Result<(), u8> {
    let output = pipeline::run_pipeline(cfg, opts).map_err(fail)?;
    if let Some(t) = &output.trajectories {
        log::info!("stage 1 loss {:.6e} (trial {})", t.loss, t.trial_index);
    }
    if let Some(m) = &output.morphology {
        log::info!("stage 2 loss {:.6e} (trial {})", m.loss, m.trial_index);
    }
    if let Some(report) = &output.metrics {
        print_metrics(report);
    }
    println!("wrote {}", opts.out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<(), u8> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = load_config(c.config.as_deref(), c.seed)?;
            let (truth, data) = pipeline::simulate(&cfg, &c.out, c.force).map_err(fail)?;
            println!(
                "simulated {} particles, {} x {} sinogram, wrote {}",
                truth.len(),
                data.num_detectors(),
                data.num_times(),
                c.out.display()
            );
            Ok(())
        }
        Command::Reconstruct(r) => {
            let stage = StageSelection::from(r.stage);
            if r.sinogram.is_none() && stage != StageSelection::Two {
                log::error!("reconstruct needs --sinogram unless --stage 2");
                return Err(2);
            }
            let cfg = load_config(r.common.config.as_deref(), r.common.seed)?;
            let opts = PipelineOptions {
                out: r.common.out,
                stage,
                force: r.common.force,
                sinogram: r.sinogram,
                truth: r.truth,
            };
            run_with(&cfg, &opts)
        }
        Command::Run(r) => {
            let cfg = load_config(r.common.config.as_deref(), r.common.seed)?;
            let opts = PipelineOptions {
                out: r.common.out,
                stage: r.stage.into(),
                force: r.common.force,
                sinogram: None,
                truth: None,
            };
            run_with(&cfg, &opts)
        }
        Command::CheckGradients(g) => {
            let cfg = load_config(g.config.as_deref(), None)?;
            let checks = audit_gradients(&cfg, g.count, g.scale, g.step, g.seed).map_err(|e| {
                log::error!("{e}");
                core_code(&e)
            })?;
            let mut worst: f64 = 0.0;
            for (k, c) in checks.iter().enumerate() {
                println!("{k}\t{:.3e}\t{:?}", c.max_rel_error, c.worst_index);
                worst = worst.max(c.max_rel_error);
            }
            println!("max relative error {worst:.3e} (tolerance {:.1e})", g.tolerance);
            if worst <= g.tolerance {
                Ok(())
            } else {
                Err(1)
            }
        }
        Command::Report(r) => {
            let truth_path = r.truth.unwrap_or_else(|| r.out.join(TRUTH_FILE));
            let truth: Scene = read_json(&truth_path).map_err(|e| {
                log::error!("cannot load truth {}: {e}", truth_path.display());
                core_code(&e)
            })?;
            let report = pipeline::report(&r.out, &truth).map_err(fail)?;
            write_json(&r.out.join(METRICS_FILE), &report).map_err(|e| {
                log::error!("{e}");
                5
            })?;
            print_metrics(&report);
            Ok(())
        }
    }
}

fn configure_threads() {
    let n = std::env::var("GMMCT_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    if n > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
