// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, field `{field}`: {message}")]
    Parse {
        row: usize,
        field: String,
        message: String,
    },

    #[error("duplicate visit for patient `{patient_id}` on {date}")]
    DuplicateVisit { patient_id: String, date: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("cohort is empty after preprocessing")]
    EmptyCohort,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("template error: {0}")]
    Template(String),

    #[error("mock policy error: {0}")]
    Policy(String),

    #[error("transport error for backend `{backend_id}` after {attempts} attempt(s): {message}")]
    Transport {
        backend_id: String,
        attempts: u32,
        message: String,
    },

    #[error("credential error for backend `{backend_id}`: {message}")]
    Credential { backend_id: String, message: String },

    #[error("replay error: cache miss for key {key}")]
    Replay { key: String },

    #[error("offline policy violation: {0}")]
    Offline(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("stage-order error: {0}")]
    StageOrder(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation/config/policy, 2 transport, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::DuplicateVisit { .. }
            | Error::Validation(_)
            | Error::EmptyCohort
            | Error::Config(_)
            | Error::Split(_)
            | Error::Template(_)
            | Error::Policy(_)
            | Error::Offline(_)
            | Error::StageOrder(_)
            | Error::Replay { .. } => 1,
            Error::Transport { .. } | Error::Credential { .. } => 2,
            _ => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
