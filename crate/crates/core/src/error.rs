use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// Variants fall into three classes (see [`Error::class`]) which the CLI maps
/// onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("invalid document `{id}`: {msg}")]
    InvalidDocument { id: String, msg: String },
    #[error("synthetic document `{id}` points at unknown origin `{origin}`")]
    DanglingOrigin { id: String, origin: String },
    #[error("leakage: synthetic document `{id}` has origin `{origin}` in split `{split}`")]
    Leakage {
        id: String,
        origin: String,
        split: String,
    },
    #[error("chunk sequence error: {0}")]
    ChunkOrder(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("backend: {0}")]
    Backend(String),
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("missing credentials: environment variable `{0}` is not set")]
    MissingAuth(String),
    #[error("script exhausted")]
    ScriptExhausted,
    #[error("unparseable judge reply: {0:?}")]
    JudgeParse(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
}

/// Coarse error class, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Backend,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: &std::path::Path, e: csv::Error) -> Self {
        Error::InvalidInput(format!("{}: {e}", path.display()))
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Backend(_)
            | Error::Transient(_)
            | Error::RetriesExhausted { .. }
            | Error::MissingAuth(_)
            | Error::ScriptExhausted
            | Error::JudgeParse(_) => ErrorClass::Backend,
            _ => ErrorClass::Data,
        }
    }

    /// Whether a gateway retry may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Transient(_))
    }
}
