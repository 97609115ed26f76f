use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("span count mismatch: {0} vs {1}")]
    SpanCountMismatch(usize, usize),

    #[error("no evaluable pairs: {0}")]
    NoEvaluablePairs(String),

    #[error("structural section {index} altered")]
    StructuralMismatch { index: usize },

    #[error("feature provider failed on span {index}: {message}")]
    Provider { index: usize, message: String },

    #[error("no viable candidate after {attempts} attempts")]
    NoViableCandidate { attempts: usize },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("remote returned HTTP {status}: {message}")]
    Remote { status: u16, message: String },

    #[error("tagger response rejected after {attempts} attempts: {last}")]
    TaggerExhausted { attempts: usize, last: String },

    #[error("attack unavailable: {0}")]
    AttackUnavailable(String),

    #[error("both member and nonmember labels are required")]
    SingleLabel,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Short machine-readable category, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Record { .. } => "record",
            Error::DuplicateId(_) => "duplicate_id",
            Error::DimensionMismatch(..) => "dimension_mismatch",
            Error::SpanCountMismatch(..) => "span_count_mismatch",
            Error::NoEvaluablePairs(_) => "no_evaluable_pairs",
            Error::StructuralMismatch { .. } => "structural_mismatch",
            Error::Provider { .. } => "provider",
            Error::NoViableCandidate { .. } => "no_viable_candidate",
            Error::Transport(_) => "transport",
            Error::Remote { .. } => "remote",
            Error::TaggerExhausted { .. } => "tagger_exhausted",
            Error::AttackUnavailable(_) => "attack_unavailable",
            Error::SingleLabel => "single_label",
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
