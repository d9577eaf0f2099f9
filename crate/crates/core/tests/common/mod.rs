//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use gmmct::optim::rng::{standard_normal, uniform, SeededRng};
use nalgebra::{DMatrix, DVector};

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const K15_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_8,
];
// Gauss weights sit on the odd Kronrod nodes.
const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = K15_WEIGHTS[7] * fc;
    let mut gauss = G7_WEIGHTS[3] * fc;
    for i in 0..7 {
        let x = h * GK_NODES[i];
        let pair = f(c - x) + f(c + x);
        kronrod += K15_WEIGHTS[i] * pair;
        if i % 2 == 1 {
            gauss += G7_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Globally adaptive Gauss-Kronrod (7/15) quadrature: the interval with the
/// largest error estimate is bisected until the summed estimate is below
/// `tol` or the interval budget runs out.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let mut parts = vec![(a, b, gk15(&f, a, b))];
    for _ in 0..2000 {
        let total_err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if total_err <= tol {
            break;
        }
        let (k, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .expect("at least one interval");
        let (lo, hi, _) = parts.swap_remove(k);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, gk15(&f, lo, mid)));
        parts.push((mid, hi, gk15(&f, mid, hi)));
    }
    parts.iter().map(|p| p.2 .0).sum()
}

/// Line integral of `exp(-|U (x - center)|^2)` along the full line through
/// `s` and `r`, by quadrature around the point of closest approach.
pub fn xray_by_quadrature(u: &DMatrix<f64>, center: &DVector<f64>, s: &DVector<f64>, r: &DVector<f64>) -> f64 {
    let dir = (r - s).normalize();
    let a = u * &dir;
    let b = u * (center - s);
    let xi_star = a.dot(&b) / a.norm_squared();
    let sigma = 1.0 / a.norm();
    let f = |xi: f64| {
        let x = s + &dir * xi;
        (-(u * (x - center)).norm_squared()).exp()
    };
    let peak = f(xi_star);
    integrate(f, xi_star - 12.0 * sigma, xi_star + 12.0 * sigma, 1e-14 * peak * sigma)
}

/// Minimum-cost assignment by enumerating every injective matching of the
/// smaller side into the larger.
pub fn brute_force_assignment(cost: &DMatrix<f64>) -> f64 {
    let (rows, cols) = cost.shape();
    let (small, large, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if rows <= cols {
        (rows, cols, Box::new(|i, j| cost[(i, j)]))
    } else {
        (cols, rows, Box::new(|i, j| cost[(j, i)]))
    };
    fn rec(i: usize, small: usize, large: usize, used: &mut Vec<bool>, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == small {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                best = best.min(at(i, j) + rec(i + 1, small, large, used, at));
                used[j] = false;
            }
        }
        best
    }
    rec(0, small, large, &mut vec![false; large], &*at)
}

/// Non-negative least squares by trying every support set: the optimum is
/// the unconstrained fit on its own support, so the best feasible candidate
/// is optimal.
pub fn exhaustive_nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = a.ncols();
    let mut best = (DVector::zeros(n), 0.5 * b.norm_squared());
    for mask in 1u32..(1 << n) {
        let cols: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let sub = DMatrix::from_fn(a.nrows(), cols.len(), |i, k| a[(i, cols[k])]);
        let Ok(z) = sub.clone().svd(true, true).solve(b, 1e-14) else { continue };
        if z.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut x = DVector::zeros(n);
        for (k, &j) in cols.iter().enumerate() {
            x[j] = z[k];
        }
        let obj = 0.5 * (a * &x - b).norm_squared();
        if obj < best.1 {
            best = (x, obj);
        }
    }
    best
}

/// Random upper-triangular matrix with diagonal in `[lo, hi]` and normal
/// off-diagonal entries.
pub fn random_upper(rng: &mut SeededRng, d: usize, lo: f64, hi: f64, off_mean: f64, off_std: f64) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(d, d);
    for i in 0..d {
        u[(i, i)] = uniform(rng, lo, hi);
        for j in i + 1..d {
            u[(i, j)] = off_mean + off_std * standard_normal(rng);
        }
    }
    u
}

pub fn random_vector(rng: &mut SeededRng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * standard_normal(rng))
}
