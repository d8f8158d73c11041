use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Decode { path: PathBuf, offset: usize },

    #[error("{0}: empty script")]
    EmptyScript(PathBuf),

    #[error("cannot build from zero documents")]
    NoDocuments,

    #[error("universe `{0}` has no training documents")]
    EmptyUniverse(String),

    #[error("raw label `{0}` is not covered by the label map")]
    UnmappedLabel(String),

    #[error("a universe set needs at least 2 distinct labels, got {0}")]
    TooFewUniverses(usize),

    #[error("duplicate universe label `{0}`")]
    DuplicateUniverse(String),

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("belief step mismatch: prior at step {prior}, posterior at step {posterior}")]
    StepMismatch { prior: usize, posterior: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("retrieval index is empty")]
    EmptyIndex,

    #[error("requested {requested} candidates but only {available} are available")]
    NotEnoughCandidates { requested: usize, available: usize },

    #[error("conversation model returned no candidates")]
    NoCandidates,

    #[error("candidate has no tokens")]
    EmptyCandidate,

    #[error("score table incomplete: {0}")]
    MissingScores(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
