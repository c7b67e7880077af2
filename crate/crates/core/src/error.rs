use std::path::PathBuf;

use thiserror::Error;

use crate::types::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid hardware: {0}")]
    InvalidHardware(String),

    #[error("infeasible parallelism config: {0}")]
    Infeasible(Violation),

    #[error("all-reduce bandwidth map has no entry for tp={0}")]
    MissingAllReduceEntry(u32),

    #[error("unsupported transition: {0}")]
    UnsupportedTransition(String),

    #[error("invalid simulation input: {0}")]
    InvalidSimulation(String),

    #[error("workload is empty")]
    EmptyWorkload,

    #[error("request {id} needs {bytes} KV bytes but the {tier} tier holds {capacity}")]
    RequestTooLarge {
        id: u64,
        bytes: u64,
        tier: &'static str,
        capacity: u64,
    },

    #[error("no feasible parallelism config for this model and hardware")]
    NoFeasibleConfig,

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed event log: {0}")]
    MalformedLog(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Document(String),
}

impl Error {
    /// Stable identifier for machine-readable error reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidHardware(_) => "invalid_hardware",
            Error::Infeasible(_) => "infeasible_config",
            Error::MissingAllReduceEntry(_) => "missing_allreduce_entry",
            Error::UnsupportedTransition(_) => "unsupported_transition",
            Error::InvalidSimulation(_) => "invalid_simulation",
            Error::EmptyWorkload => "empty_workload",
            Error::RequestTooLarge { .. } => "request_too_large",
            Error::NoFeasibleConfig => "no_feasible_config",
            Error::Parse { .. } => "parse_error",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::MalformedLog(_) => "malformed_log",
            Error::Io { .. } => "io_error",
            Error::Document(_) => "document_error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
