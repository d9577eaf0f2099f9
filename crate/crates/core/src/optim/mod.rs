//! Numerical kernels shared by both reconstruction stages.

mod assignment;
mod gradcheck;
mod lbfgs;
mod nnls;
pub mod rng;

pub use assignment::{rectangular_assignment, Assignment};
pub use gradcheck::{check_gradient, GradientCheck};
pub use lbfgs::{minimize, LbfgsSettings, MinimizeResult, MinimizeStatus, TraceEntry};
pub use nnls::{nnls, NnlsSolution};
