//! Seeded random streams and samplers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// The generator used throughout: ChaCha20 seeded through `seed_from_u64`.
pub type SeededRng = ChaCha20Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Child seed for `(seed, stream)`, mixed with splitmix64.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    seeded_rng(derive_seed(seed, stream))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draw from `N(mean, cov)` using a Cholesky factor of `cov`.
pub fn multivariate_normal<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let d = mean.len();
    if cov.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!("covariance must be {d}x{d}")));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("covariance is not positive definite".into()))?;
    let z = DVector::from_fn(d, |_, _| standard_normal(rng));
    Ok(mean + chol.l() * z)
}
