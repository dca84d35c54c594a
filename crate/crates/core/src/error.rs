use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("I/O error: {0}")]
    Stream(#[from] io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("input contains no interactions")]
    EmptyCatalog,

    #[error("k-core filter removed every interaction after {iterations} rounds")]
    EmptyAfterFilter { iterations: usize },

    #[error("bad {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("vector `{id}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("vector `{id}` contains a non-finite component")]
    NonFinite { id: String },

    #[error("cosine similarity undefined for zero-norm vector `{id}`")]
    ZeroNorm { id: String },

    #[error("no candidates left after exclusion")]
    EmptyCandidates,

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("missing embedding for `{key}` in {namespace}")]
    MissingEmbedding { namespace: String, key: String },

    #[error("could not parse LLM response: {message}")]
    ResponseParse { message: String, raw: String },

    #[error("only {} usable preferences, need 5", survivors.len())]
    IncompletePreferences { survivors: Vec<String> },

    #[error("preference `{0}` is not negative and cannot be inverted")]
    NotNegative(String),

    #[error("template `{name}` must contain exactly one `{{}}` placeholder, found {found}")]
    Template { name: String, found: usize },

    #[error("LLM client error: {0}")]
    Client(String),

    #[error("embedder error: {0}")]
    Embedder(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("semantic id path {0:?} is assigned to more than one item")]
    DuplicatePath(Vec<u32>),

    #[error("scorer returned a non-finite log-probability below prefix {0:?}")]
    NonFiniteScore(Vec<u32>),

    #[error("semantic id {0:?} is not in the id map")]
    UnknownPath(Vec<u32>),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("twin instances disagree on target: `{pos}` vs `{neg}`")]
    TwinMismatch { pos: String, neg: String },

    #[error("digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            kind,
            message: message.into(),
        }
    }
}
