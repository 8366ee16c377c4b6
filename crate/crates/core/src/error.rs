use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot convert record {id}: {reason}")]
    Conversion { id: String, reason: String },

    #[error("invalid turn: {0}")]
    InvalidTurn(String),

    #[error("invalid episode state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no script entry matches call #{seq} of tag `{tag}` (last user message: {preview:?})")]
    UnmatchedPrompt {
        tag: String,
        seq: usize,
        preview: String,
    },

    #[error("backend unavailable after {attempts} attempts: {message}")]
    BackendUnavailable { attempts: usize, message: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("empty completion for `{tag}`")]
    EmptyCompletion { tag: String },

    #[error("fact decomposition failed: {0}")]
    Decomposition(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
