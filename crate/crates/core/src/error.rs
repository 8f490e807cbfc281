use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidScenario(Vec<String>),

    #[error("environment pool exhausted for fingerprint {fingerprint}")]
    PoolExhausted { fingerprint: String },

    #[error("unknown environment {0}")]
    UnknownEnv(String),

    #[error("corrupt event log record at line {line} (after seq {after_seq}): {reason}")]
    CorruptLog {
        line: usize,
        after_seq: u64,
        reason: String,
    },

    #[error("event log seq {got} is not greater than previous seq {prev}")]
    NonMonotoneSeq { prev: u64, got: u64 },

    #[error("event rejected by state: {0}")]
    InvalidEvent(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
