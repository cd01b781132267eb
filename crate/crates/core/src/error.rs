use std::path::PathBuf;

use thiserror::Error;

use crate::data::Coord;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("empty interaction matrix")]
    EmptyMatrix,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index out of range: {what} {index} >= {bound}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("singular subproblem")]
    SingularSubproblem,
    #[error("singular downdate (|1 - q| = {gap:e})")]
    SingularDowndate { gap: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("meaningless deletion: coordinate ({}, {}) is not observed", .0.user, .0.item)]
    MeaninglessDeletion(Coord),
    #[error("no audit target: removal set is empty")]
    NoAuditTarget,
    #[error("infeasible sample: requested {requested}, only {available} available")]
    Infeasible { requested: usize, available: usize },
    #[error("model format error: {0}")]
    Format(String),
}

impl Error {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::EmptyInput(_) => "empty_input",
            Error::EmptyMatrix => "empty_matrix",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::OutOfRange { .. } => "out_of_range",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::SingularSubproblem => "singular_subproblem",
            Error::SingularDowndate { .. } => "singular_downdate",
            Error::NonFinite(_) => "non_finite",
            Error::MeaninglessDeletion(_) => "meaningless_deletion",
            Error::NoAuditTarget => "no_audit_target",
            Error::Infeasible { .. } => "infeasible",
            Error::Format(_) => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
