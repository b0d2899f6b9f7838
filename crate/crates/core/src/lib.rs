//! Eigenvalue and eigenvector perturbation theory for conformally perturbed
//! Laplace–Beltrami operators on closed surfaces, with a changing inner
//! product, plus numerical experiments on isospectral conformal families.

// `!(x > 0.0)` is used on purpose so that NaN fails the test.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assembly;
pub mod checks;
pub mod eigen;
pub mod error;
pub mod expr;
pub mod isospec;
pub mod perturb;
pub mod surface;
pub mod tracking;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
