use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Hermitian (max |a_ij - conj(a_ji)| = {0:e})")]
    NotHermitian(f64),
    #[error("non-finite matrix entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("eigendecomposition failed to converge")]
    EigenFailure,
    #[error("spectral parameter {0} lies on the real axis")]
    RealSpectralParameter(Complex64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("MDE solver did not converge at z = {z} (residual {residual:e} after {iterations} iterations)")]
    MdeNoConvergence {
        z: Complex64,
        residual: f64,
        iterations: usize,
    },
    #[error("invalid deformation: {0}")]
    InvalidDeformation(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("characteristic left the domain at t = {t} (z = {z})")]
    FlowExit { t: f64, z: Complex64 },
    #[error("backward flow did not converge: {0}")]
    BackwardFlow(String),
    #[error("stability operator is singular (|1 - <M1 M2>| = {0:e})")]
    SingularStability(f64),
    #[error("stability inverse failed its round trip (relative error {0:e})")]
    StabilityRoundTrip(f64),
    #[error("degenerate regression input: {0}")]
    Regression(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
