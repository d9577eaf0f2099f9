use crate::error::Result;
use crate::model::{canonical_parameters, scene_from_canonical, simulate_sinogram};
use crate::optim::rng::{standard_normal, stream_rng};
use crate::optim::{check_gradient, GradientCheck};
use crate::stage2::Stage2Problem;

use super::config::ExperimentConfig;

/// Finite-difference audit of the stage-2 gradient at `count` random
/// perturbations of the configured ground truth.
///
/// Each canonical parameter moves by `scale * max(|x|, 1) * N(0, 1)`; the
/// data are the noiseless sinogram of the unperturbed truth.
pub fn audit_gradients(cfg: &ExperimentConfig, count: usize, scale: f64, rel_step: f64, seed: u64) -> Result<Vec<GradientCheck>> {
    cfg.validate()?;
    let truth = cfg.truth()?;
    let data = simulate_sinogram(&truth, &cfg.geometry)?;
    let problem = Stage2Problem::new(&data, cfg.stage2.delta_for(&data))?;
    let x_true = canonical_parameters(&truth);
    (0..count)
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let x0: Vec<f64> =
                x_true.iter().map(|&x| x + scale * x.abs().max(1.0) * standard_normal(&mut rng)).collect();
            let f = |x: &[f64]| {
                let s = scene_from_canonical(&truth, x);
                problem.loss_and_gradient(&s).unwrap_or((f64::NAN, vec![f64::NAN; x.len()]))
            };
            // Reject singular shapes before differencing.
            scene_from_canonical(&truth, &x0).validate()?;
            Ok(check_gradient(f, &x0, rel_step))
        })
        .collect()
}
