//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Coarse failure class, used by callers (notably the CLI) to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid configuration or arguments.
    Config,
    /// Missing, malformed or inconsistent data.
    Data,
    /// Numerical failure (non-convergence, loss of definiteness, ...).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    // --- numerical -------------------------------------------------------
    #[error("matrix is not symmetric: max|M - M'| = {asymmetry:.3e}")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive-definite: smallest eigenvalue = {min_eigenvalue:.6e}")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("symmetric eigendecomposition did not converge")]
    EigenDidNotConverge,
    #[error("{op}: dimension mismatch ({expected} vs {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("Karcher mean: residual {residual:.3e} after {max_iter} iterations (tol {tol:.1e})")]
    KarcherDidNotConverge {
        max_iter: usize,
        residual: f64,
        tol: f64,
    },
    #[error("{f} is undefined on eigenvalue {eigenvalue:.6e}")]
    SpectrumOutOfDomain { f: &'static str, eigenvalue: f64 },
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    // --- data ------------------------------------------------------------
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("channel maps have an empty intersection")]
    EmptyChannelIntersection,
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("duplicate channel {0:?}")]
    DuplicateChannel(String),
    #[error("{op}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("class {0} has no examples")]
    EmptyClass(usize),
    #[error("need at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("no statistics for group {0}")]
    UnknownGroup(u32),
    #[error("unknown subject {0}")]
    UnknownSubject(u32),
    #[error("unknown domain {0}")]
    UnknownDomain(u32),
    #[error("{blocks} distinct blocks cannot be split into {folds} folds")]
    TooFewBlocks { blocks: usize, folds: usize },
    #[error("{path}: bad magic (not a trial file)")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated (expected {expected} bytes, found {found})")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("manifest inconsistency: {0}")]
    ManifestMismatch(String),
    #[error("checkpoint corrupt: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),

    // --- config ----------------------------------------------------------
    #[error("config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config parse error: {0}")]
    ConfigParse(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            NotSymmetric { .. }
            | NotPositiveDefinite { .. }
            | NonFinite
            | EigenDidNotConverge
            | DimensionMismatch { .. }
            | KarcherDidNotConverge { .. }
            | SpectrumOutOfDomain { .. }
            | NonFiniteLoss { .. } => ErrorCategory::Numerical,

            EmptyInput(_)
            | EmptyChannelIntersection
            | UnknownChannel(_)
            | DuplicateChannel(_)
            | LengthMismatch { .. }
            | EmptyClass(_)
            | TooFewClasses(_)
            | UnknownGroup(_)
            | UnknownSubject(_)
            | UnknownDomain(_)
            | TooFewBlocks { .. }
            | BadMagic { .. }
            | TruncatedFile { .. }
            | ManifestMismatch(_)
            | BadCheckpoint(_)
            | Io(_) => ErrorCategory::Data,

            InvalidConfig { .. } | InvalidArgument(_) | ConfigParse(_) => ErrorCategory::Config,
        }
    }

    pub(crate) fn invalid_config(field: &str, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
