//! Deformed Wigner matrices H = W + D: deterministic approximations of resolvent chains,
//! the characteristic flow behind the zigzag argument, and Monte Carlo checks of eigenvector
//! overlap decay, ETH, local laws and rigidity.

pub mod error;
pub mod quad;
pub mod matrix_core;
pub mod mde;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
pub mod det_approx;
pub mod ensemble;
pub mod flow;
pub mod verify;
