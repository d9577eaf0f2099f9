//! Library results checked against independent brute-force or numerical references.

mod common;

use std::f64::consts::PI;

use gmmct::experiment::{generate_scene, ExperimentConfig};
use gmmct::geometry::{rotation_matrix, RotationParams};
use gmmct::model::{effective_gaussian, forward_gradients, forward_operator, simulate_sinogram, xray_gaussian};
use gmmct::modes::{Mode, ModeSet};
use gmmct::optim::rng::{seeded_rng, standard_normal, uniform};
use gmmct::optim::{check_gradient, nnls, rectangular_assignment};
use gmmct::stage1::{assignment_loss, sample_initial_trajectories, Stage1Config};
use gmmct::stage2::{grid_search_rotation, huber, Stage2Problem};
use gmmct::{AcquisitionGeometry, ParticleParams, Scene, TrajectoryParams};
use nalgebra::{DMatrix, DVector};

use common::{brute_force_assignment, exhaustive_nnls, random_upper, random_vector, xray_by_quadrature};

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn planar(d: usize, i: usize, j: usize, angle: f64) -> DMatrix<f64> {
    let mut g = DMatrix::identity(d, d);
    g[(i, i)] = angle.cos();
    g[(j, j)] = angle.cos();
    g[(i, j)] = -angle.sin();
    g[(j, i)] = angle.sin();
    g
}

#[test]
fn three_d_rotation_is_product_of_planar_factors() {
    let mut rng = seeded_rng(11);
    for _ in 0..100 {
        let w: Vec<f64> = (0..3).map(|_| uniform(&mut rng, -PI, PI)).collect();
        let expected = planar(3, 0, 1, w[0]) * planar(3, 0, 2, w[1]) * planar(3, 1, 2, w[2]);
        let r = rotation_matrix(&RotationParams::new(w), 3).unwrap();
        assert!((&r - &expected).amax() < 1e-14);
        assert!((r.transpose() * &r - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn effective_precision_is_rotated_precision() {
    let mut rng = seeded_rng(12);
    for d in [2, 3] {
        for _ in 0..100 {
            let rd = d * (d - 1) / 2;
            let p = ParticleParams {
                alpha: 1.0,
                shape: random_upper(&mut rng, d, 0.5, 3.0, 0.0, 1.0),
                angular_velocity: RotationParams::new((0..rd).map(|_| uniform(&mut rng, -3.0, 3.0)).collect::<Vec<_>>()),
                trajectory: TrajectoryParams::new(random_vector(&mut rng, d, 1.0), random_vector(&mut rng, d, 1.0), DVector::zeros(d)),
            };
            let t = uniform(&mut rng, 0.0, 2.0);
            let (w, _) = effective_gaussian(&p, t);
            let r = rotation_matrix(&p.angular_velocity.scaled(t), d).unwrap();
            let expected = &r * p.precision() * r.transpose();
            assert!((w.transpose() * &w - &expected).amax() < 1e-11 * expected.amax());
        }
    }
}

#[test]
fn projection_matches_quadrature_in_two_and_three_dimensions() {
    let mut rng = seeded_rng(13);
    for d in [2, 3] {
        for _ in 0..50 {
            let u = random_upper(&mut rng, d, 1.0, 5.0, 0.0, 2.0);
            let s = random_vector(&mut rng, d, 1.0);
            let r = &s + random_vector(&mut rng, d, 2.0);
            let center = &s + (&r - &s) * 0.7 + random_vector(&mut rng, d, 0.1);
            let exact = xray_gaussian(&u, &center, &s, &r).unwrap();
            let quad = xray_by_quadrature(&u, &center, &s, &r);
            assert!((exact - quad).abs() <= 1e-8 * quad, "{exact} vs {quad}");
        }
    }
}

fn random_particle(rng: &mut gmmct::optim::rng::SeededRng, d: usize) -> ParticleParams {
    let rd = d * (d - 1) / 2;
    ParticleParams {
        alpha: uniform(rng, 5.0, 20.0),
        shape: random_upper(rng, d, 2.0, 6.0, 0.0, 1.5),
        angular_velocity: RotationParams::new((0..rd).map(|_| uniform(rng, -4.0, 4.0)).collect::<Vec<_>>()),
        trajectory: TrajectoryParams::new(
            DVector::from_fn(d, |_, _| uniform(rng, 0.5, 1.5)),
            random_vector(rng, d, 1.0),
            random_vector(rng, d, 1.0),
        ),
    }
}

#[test]
fn forward_gradients_match_central_differences() {
    let mut rng = seeded_rng(14);
    for case in 0..50 {
        let d = if case % 2 == 0 { 2 } else { 3 };
        let first = random_particle(&mut rng, d);
        let mut second = random_particle(&mut rng, d);
        // Both particles near the ray, so no component is negligible.
        second.trajectory = first.trajectory.clone();
        second.trajectory.position += random_vector(&mut rng, d, 0.1);
        let scene = Scene::new(vec![first, second]).unwrap();
        let t = uniform(&mut rng, 0.0, 0.5);
        let s = DVector::from_element(d, -1.0);
        // Aim the ray near the first particle so the value is not negligible.
        let c = scene.particles[0].trajectory.at(t);
        let r = &s + (&c - &s) * 2.0 + random_vector(&mut rng, d, 0.05);
        let x0 = gmmct::model::canonical_parameters(&scene);
        let f = |x: &[f64]| {
            let sc = gmmct::model::scene_from_canonical(&scene, x);
            (forward_operator(&sc, &s, &r, t).unwrap(), forward_gradients(&sc, &s, &r, t).unwrap())
        };
        let check = check_gradient(f, &x0, 1e-6);
        assert!(check.max_rel_error <= 1e-5, "case {case}: {check:?}");
    }
}

fn mode_at(y: f64) -> Mode {
    Mode { detector_index: 0, fractional_index: 0.0, position: v(&[4.0, y]), value: 1.0 }
}

#[test]
fn assignment_loss_matches_enumeration() {
    let geom = AcquisitionGeometry::new(v(&[-1.0, 1.0]), v(&[4.0, 1.0]), v(&[4.0, -3.0]), 64, (0.0, 1.0), 8).unwrap();
    let mut rng = seeded_rng(15);
    for _ in 0..40 {
        let n = 1 + (uniform(&mut rng, 0.0, 4.0) as usize).min(3);
        let etas: Vec<TrajectoryParams> = (0..n)
            .map(|_| {
                TrajectoryParams::new(
                    v(&[1.0, 1.0]),
                    v(&[uniform(&mut rng, 0.3, 2.0), uniform(&mut rng, -1.0, 3.0)]),
                    v(&[0.0, -9.81]),
                )
            })
            .collect();
        let times = geom.times();
        let modes: Vec<Vec<Mode>> = times
            .iter()
            .map(|_| {
                let k = (uniform(&mut rng, 0.0, 5.0) as usize).min(4);
                (0..k).map(|_| mode_at(uniform(&mut rng, -3.0, 1.0))).collect()
            })
            .collect();
        let observed = ModeSet { times: times.clone(), modes };
        let (loss, _) = assignment_loss(&etas, &observed, &geom).unwrap();
        let mut expected = 0.0;
        for (m, &t) in times.iter().enumerate() {
            let obs = &observed.modes[m];
            if obs.is_empty() {
                continue;
            }
            let pred: Vec<DVector<f64>> = etas.iter().map(|e| gmmct::modes::mode_map(e, t, &geom).unwrap()).collect();
            let cost = DMatrix::from_fn(pred.len(), obs.len(), |i, j| (&pred[i] - &obs[j].position).norm_squared());
            expected += brute_force_assignment(&cost);
        }
        assert!((loss - expected).abs() <= 1e-12 * expected.max(1.0), "{loss} vs {expected}");
    }
}

#[test]
fn assignment_matches_enumeration_on_small_integer_matrices() {
    for code in 0..3usize.pow(6) {
        let mut c = code;
        let cost = DMatrix::from_fn(2, 3, |_, _| {
            let e = (c % 3) as f64;
            c /= 3;
            e
        });
        let got = rectangular_assignment(&cost).unwrap().cost;
        assert_eq!(got, brute_force_assignment(&cost), "{cost}");
        let got_t = rectangular_assignment(&cost.transpose()).unwrap().cost;
        assert_eq!(got_t, got);
    }
}

#[test]
fn nnls_matches_enumeration_on_tall_problems() {
    let mut rng = seeded_rng(16);
    for _ in 0..50 {
        let a = DMatrix::from_fn(30, 5, |_, _| uniform(&mut rng, 0.0, 1.0));
        let truth = DVector::from_fn(5, |i, _| if i % 2 == 0 { uniform(&mut rng, 0.0, 3.0) } else { 0.0 });
        let b = &a * &truth + DVector::from_fn(30, |_, _| 0.3 * standard_normal(&mut rng));
        let sol = nnls(&a, &b).unwrap();
        let (x_best, best) = exhaustive_nnls(&a, &b);
        let obj = 0.5 * (&a * &sol.x - &b).norm_squared();
        assert!((obj - best).abs() <= 1e-12 * best.max(1.0));
        assert!((&sol.x - &x_best).amax() <= 1e-8);
    }
}

#[test]
fn generated_rates_respect_the_guard_band() {
    let cfg = ExperimentConfig::five_particle();
    let dt = cfg.geometry.time_step();
    let band = cfg.generation.guard_band_fraction * PI;
    let mut count = 0;
    for seed in 0..200 {
        let scene = generate_scene(&cfg, seed).unwrap();
        for p in &scene.particles {
            let w = p.angular_velocity.0[0];
            assert!((2.0..=6.0).contains(&w));
            let phase = (w * dt).rem_euclid(PI);
            let nearest_is_zero = w * dt < 0.5 * PI;
            assert!(nearest_is_zero || phase.min(PI - phase) >= band, "rate {w}");
            count += 1;
        }
    }
    assert_eq!(count, 1000);
}

#[test]
fn initial_velocity_draws_have_the_configured_moments() {
    let cfg = Stage1Config { seed: 99, ..Stage1Config::default() };
    let draws = sample_initial_trajectories(&cfg, 10_000, 0).unwrap();
    for k in 0..2 {
        let mean = draws.iter().map(|x| x[k]).sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.5).abs() < 0.05, "std {}", var.sqrt());
    }
}

#[test]
fn morphology_loss_matches_direct_summation() {
    let geom = AcquisitionGeometry::new(v(&[-1.0, 1.0]), v(&[4.0, 1.0]), v(&[4.0, -3.0]), 4, (0.3, 0.6), 4).unwrap();
    let truth = Scene::new(vec![ParticleParams {
        alpha: 10.0,
        shape: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 0.0, 2.0]),
        angular_velocity: RotationParams::new(vec![2.5]),
        trajectory: TrajectoryParams::new(v(&[1.0, 1.0]), v(&[1.0, 0.5]), v(&[0.0, -9.81])),
    }])
    .unwrap();
    let data = simulate_sinogram(&truth, &geom).unwrap();
    let mut guess = truth.clone();
    guess.particles[0].alpha = 20.0;
    let delta = 0.5;
    let loss = Stage2Problem::new(&data, delta).unwrap().loss(&guess).unwrap();
    let mut direct = 0.0;
    for m_t in 0..4 {
        for m_r in 0..4 {
            let f = forward_operator(&guess, &geom.source, &geom.detector_position(m_r), geom.time(m_t)).unwrap();
            direct += huber(data.value(m_r, m_t) - f, delta);
        }
    }
    direct /= 16.0;
    assert!((loss - direct).abs() <= 1e-14 * direct.max(1e-300), "{loss} vs {direct}");
}

#[test]
fn three_d_grid_search_agrees_with_exhaustive_scan() {
    let geom = AcquisitionGeometry::new(v(&[-1.0, 1.0, 0.0]), v(&[4.0, 1.0, 0.0]), v(&[4.0, -3.0, 0.0]), 24, (0.2, 0.8), 12)
        .unwrap();
    let truth = Scene::new(vec![ParticleParams {
        alpha: 10.0,
        shape: DMatrix::from_row_slice(3, 3, &[12.0, 3.0, 1.0, 0.0, 6.0, 2.0, 0.0, 0.0, 4.0]),
        angular_velocity: RotationParams::new(vec![2.4, 0.0, 0.0]),
        trajectory: TrajectoryParams::new(v(&[1.0, 1.0, 0.0]), v(&[1.0, 0.5, 0.1]), v(&[0.0, -9.81, 0.0])),
    }])
    .unwrap();
    let data = simulate_sinogram(&truth, &geom).unwrap();
    let grid: Vec<f64> = (0..41).map(|i| -1.0 + 0.1 * i as f64).collect();
    let mut start = truth.clone();
    start.particles[0].angular_velocity = RotationParams::new(vec![0.0, 0.0, 0.0]);
    let found = grid_search_rotation(0, &start, &data, &grid).unwrap();

    // Independent scan: simulate each candidate in full and compare sums of squares.
    let mut theta = vec![0.0; 3];
    for k in 0..3 {
        let mut best = (f64::INFINITY, 0.0);
        for &w in &grid {
            let mut cand = start.clone();
            let mut omega = theta.clone();
            omega[k] = w;
            cand.particles[0].angular_velocity = RotationParams::new(omega);
            let sim = simulate_sinogram(&cand, &geom).unwrap();
            let res: f64 = sim.values().iter().zip(data.values()).map(|(a, b)| (a - b).powi(2)).sum();
            if res < best.0 {
                best = (res, w);
            }
        }
        theta[k] = best.1;
    }
    let pitch = 0.1;
    for k in 0..3 {
        assert!((found.0[k] - theta[k]).abs() < 1e-12);
        assert!((found.0[k] - truth.particles[0].angular_velocity.0[k]).abs() <= pitch + 1e-12);
    }
}
