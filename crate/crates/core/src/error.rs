use std::path::PathBuf;

use thiserror::Error;

use crate::ot::TransportPlan;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite value in input")]
    NonFinite,

    #[error("vector is not unit norm (norm = {norm})")]
    NotUnitNorm { norm: f64 },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("unknown prompt owner: {0}")]
    UnknownOwner(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("no centroid for domain {domain}, class {class}")]
    MissingCentroid { domain: usize, class: usize },

    #[error("marginals are not feasible: {0}")]
    InfeasibleMarginals(String),

    #[error("sinkhorn did not converge: marginal violation {violation:e} after {iterations} iterations")]
    NotConverged {
        violation: f64,
        iterations: usize,
        plan: Box<TransportPlan>,
    },

    #[error("class cardinalities B*pi_k are not integral")]
    NonIntegralCardinalities,

    #[error("enumeration too large: {count} assignments")]
    TooLarge { count: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("base-table fit failed for seed {seed}: {reason}")]
    SeedFitFailure { seed: u64, reason: String },

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("truncated blob {path}: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
