use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RammError>;

#[derive(Debug, Error)]
pub enum RammError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic {
        what: &'static str,
        expected: &'static str,
    },

    #[error("unsupported {what} version {found}")]
    UnsupportedVersion { what: &'static str, found: u32 },

    #[error("truncated {what}: needed {needed} bytes, found {found}")]
    Truncated {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error(
        "fingerprint mismatch: index was built with {found:016x}, current model is {expected:016x}; rebuild the index from this checkpoint"
    )]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("duplicate pair id {0}")]
    DuplicatePairId(u64),

    #[error("unknown pair id {0}")]
    UnknownPairId(u64),

    #[error("parameter structure mismatch: {0}")]
    Structure(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("invalid retrieval count r={0}")]
    InvalidR(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Regex(#[from] regex::Error),
}

impl RammError {
    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        RammError::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Stable short name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            RammError::Dimension { .. } => "dimension",
            RammError::Index { .. } => "index",
            RammError::NonFinite(_) => "non-finite",
            RammError::Config(_) => "config",
            RammError::Contract(_) => "contract",
            RammError::BadMagic { .. } => "bad-magic",
            RammError::UnsupportedVersion { .. } => "unsupported-version",
            RammError::Truncated { .. } => "truncated",
            RammError::FingerprintMismatch { .. } => "fingerprint-mismatch",
            RammError::Format { .. } => "format",
            RammError::DuplicatePairId(_) => "duplicate-pair-id",
            RammError::UnknownPairId(_) => "unknown-pair-id",
            RammError::Structure(_) => "structure",
            RammError::MissingArtifact(_) => "missing-artifact",
            RammError::InvalidR(_) => "invalid-r",
            RammError::Io(_) => "io",
            RammError::Json(_) => "json",
            RammError::Regex(_) => "regex",
        }
    }

    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            RammError::MissingArtifact(_) => 3,
            RammError::FingerprintMismatch { .. } => 4,
            RammError::InvalidR(_) => 5,
            RammError::BadMagic { .. }
            | RammError::UnsupportedVersion { .. }
            | RammError::Truncated { .. }
            | RammError::Format { .. } => 6,
            RammError::Config(_) => 7,
            RammError::Io(_) => 8,
            _ => 1,
        }
    }
}
