//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input geometry cannot support a triangulation.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A query location is not covered by the mesh.
    #[error("location {index} ({x}, {y}) is outside the mesh")]
    OutOfDomain { index: usize, x: f64, y: f64 },

    /// Operator parameters outside the supported family.
    #[error("unsupported operator: {0}")]
    UnsupportedOperator(String),

    /// A parameter violates its domain constraint.
    #[error("domain error: {0}")]
    Domain(String),

    /// Sparse factorization failed; the system is singular or indefinite.
    #[error("indefinite system: {0}")]
    IndefiniteSystem(String),

    /// A correlation curve never crossed the requested threshold.
    #[error("correlation range undefined: curve never drops below {threshold} within the mesh")]
    RangeUndefined { threshold: f64 },

    /// Malformed input data (CSV schema, referential integrity, config keys).
    #[error("schema error: {0}")]
    Schema(String),

    /// Estimation could not produce a usable result.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Optimizer could not locate a valid starting region.
    #[error("initialization error: {0}")]
    Initialization(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code classification: schema/input errors exit 2,
    /// numerical failures exit 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateGeometry(_)
            | Error::OutOfDomain { .. }
            | Error::UnsupportedOperator(_)
            | Error::Domain(_)
            | Error::Schema(_)
            | Error::Io(_) => 2,
            Error::IndefiniteSystem(_)
            | Error::RangeUndefined { .. }
            | Error::Estimation(_)
            | Error::Initialization(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
