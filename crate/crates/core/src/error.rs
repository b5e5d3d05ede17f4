use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("variance at index {index} must be strictly positive, got {value}")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("Gram matrix is rank deficient beyond jitter tolerance")]
    RankDeficient,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("need at least {need} environments, have {have}")]
    TooFewEnvironments { have: usize, need: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("ground-truth sampling failed after {attempts} attempts: {reason}")]
    SamplingExhausted { attempts: usize, reason: String },

    #[error("empty control pool")]
    EmptyControlPool,

    #[error("model parameters are untrained")]
    Untrained,

    #[error("training diverged at epoch {epoch} (last good checkpoint: {checkpoint:?})")]
    Diverged {
        epoch: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("condition {0} has no cells")]
    EmptyCondition(String),

    #[error("perturbation {0} was not seen during fitting")]
    UnseenPerturbation(usize),

    #[error("control condition missing")]
    MissingControl,

    #[error("unknown format '{0}'")]
    UnknownFormat(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checksum mismatch for {file}: manifest says {expected}, file hashes to {found}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Data,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig(_)
            | Error::UnknownFormat(_)
            | Error::InvalidArgument(_)
            | Error::TooFewEnvironments { .. }
            | Error::SamplingExhausted { .. }
            | Error::Untrained => ErrorCategory::Config,
            Error::Diverged { .. }
            | Error::NonFinite(_)
            | Error::RankDeficient
            | Error::NotSquare { .. }
            | Error::NonPositiveVariance { .. } => ErrorCategory::Numeric,
            Error::Schema(_)
            | Error::ChecksumMismatch { .. }
            | Error::EmptyControlPool
            | Error::MissingControl
            | Error::EmptyCondition(_)
            | Error::SingleClass
            | Error::UnseenPerturbation(_)
            | Error::DimensionMismatch { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Io(_) => ErrorCategory::Data,
        }
    }
}

impl ErrorCategory {
    /// Process exit code: 2 config, 3 numeric divergence, 4 data.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Numeric => 3,
            ErrorCategory::Data => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::InvalidConfig("x".into()).category().exit_code(), 2);
        let diverged = Error::Diverged {
            epoch: 3,
            checkpoint: None,
        };
        assert_eq!(diverged.category().exit_code(), 3);
        assert_eq!(Error::MissingControl.category().exit_code(), 4);
    }
}
