//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid too small: {nx}x{ny} (need at least 3x3)")]
    GridTooSmall { nx: usize, ny: usize },

    #[error("domain lengths must be positive, got lx={lx}, ly={ly}")]
    InvalidDomain { lx: f64, ly: f64 },

    #[error("cell index ({i}, {j}) out of range for {nx}x{ny} grid")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        nx: usize,
        ny: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance matrix for {cells} cells exceeds the configured cap of {cap}")]
    CovarianceTooLarge { cells: usize, cap: usize },

    #[error("symmetric eigensolver failed to converge (LAPACK info = {info})")]
    EigenFailure { info: i32 },

    #[error("retained-energy index k={k} outside [1, {m}]")]
    EnergyIndexOutOfRange { k: usize, m: usize },

    #[error("latent vector length {got} does not match truncation {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("conductivity must be strictly positive everywhere")]
    NonpositiveConductivity,

    #[error("fields defined on different grids: {0}")]
    GridMismatch(String),

    #[error("linear system is singular: {0}")]
    SingularSystem(String),

    #[error("iterative solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    Nonconvergence { iterations: usize, residual: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("measurement mask has {mask} active pixels but {values} values")]
    MaskValueMismatch { mask: usize, values: usize },

    #[error("measurement set is empty")]
    EmptyMeasurements,

    #[error("requested {requested} observation points but the grid has only {cells} cells")]
    CountExceedsGrid { requested: usize, cells: usize },

    #[error("reference field is constant; coefficient of determination undefined")]
    ConstantTruth,

    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    Divergence { iteration: u64, what: String },
}
