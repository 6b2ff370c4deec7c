use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header key `{key}`: {reason}")]
    Format { key: String, reason: String },

    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("budget of {budget} bytes cannot fit the minimal patch (needs {required} bytes)")]
    InfeasibleBudget { required: f64, budget: u64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("AUC is undefined: {0}")]
    UndefinedAuc(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn format(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Missing(_)
            | Error::Precondition(_)
            | Error::Domain(_)
            | Error::Json { .. }
            | Error::Format { .. }
            | Error::InfeasibleBudget { .. } => 2,
            _ => 3,
        }
    }
}
