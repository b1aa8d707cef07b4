use thiserror::Error;

use crate::projection::KktReport;

pub type Result<T> = std::result::Result<T, SpjError>;

#[derive(Debug, Error)]
pub enum SpjError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("column {0} has zero variance and cannot be standardized")]
    ConstantColumn(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("p = {p} exceeds the configured cap of {cap} columns")]
    TooManyColumns { p: usize, cap: usize },

    #[error("shard {index}: {reason}")]
    ShardMismatch { index: usize, reason: String },

    #[error("coordinate descent did not converge after {sweeps} sweeps (active violation {:.3e}, inactive violation {:.3e})", .report.max_violation_active, .report.max_violation_inactive)]
    NoConvergence { sweeps: usize, report: KktReport },

    #[error("draw {draw}: {source}")]
    Draw {
        draw: usize,
        #[source]
        source: Box<SpjError>,
    },

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("saturated model: {selected} nonzero coefficients with n = {n}")]
    Saturated { selected: usize, n: usize },

    #[error("degenerate nodewise residual for coordinate {j}: |X_j'R_j| = {value:.3e}")]
    DegenerateResidual { j: usize, value: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch: file is corrupt or truncated")]
    Checksum,

    #[error("schema hash mismatch: expected {expected:#018x}, found {found:#018x}")]
    Schema { expected: u64, found: u64 },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
