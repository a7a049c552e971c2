//! Error types for every subsystem, plus a crate-level umbrella.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}: expected {expected} values, found {found}")]
    Format {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: line {line}: cannot parse {token:?} as a number")]
    Parse {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("{path}: line {line}: non-finite value {token:?}")]
    NonFinite {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("{0}: dataset has no samples")]
    EmptyDataset(PathBuf),
    #[error("channel files are misaligned: {0}")]
    Alignment(String),
    #[error("class {class:?} has {have} samples, {need} required")]
    InsufficientSamples {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("empty input")]
    EmptyInput,
    #[error("unknown class {0:?}")]
    UnknownClass(String),
}

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("invalid plot config: {0}")]
    Config(String),
    #[error("cannot render an empty sample")]
    EmptySample,
    #[error("png encoding failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("image cache I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("operation requires phase {expected}, bank is in phase {actual}")]
    WrongPhase {
        expected: crate::bank::Phase,
        actual: crate::bank::Phase,
    },
}

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected request with HTTP {status}: {body}")]
    AuthOrQuota { status: u16, body: String },
    #[error("script exhausted for request tag {0:?}")]
    ScriptExhausted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("client configuration: {0}")]
    Config(String),
}

/// Failure to pull a schema-valid JSON document out of a model reply.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractError {
    #[error("no parseable JSON object in output")]
    MalformedOutput,
    #[error("schema error: {0}")]
    Schema(String),
}

/// A role (generator, reflector, modifier) could not produce a usable output.
#[derive(Debug, Error)]
pub enum RoleFailure {
    #[error("{role}: transport error: {source}")]
    Transport {
        role: String,
        #[source]
        source: VlmError,
        transcripts: Vec<String>,
    },
    #[error("{role}: no valid output after {attempts} attempts: {last_error}")]
    Unparseable {
        role: String,
        attempts: u32,
        last_error: ExtractError,
        transcripts: Vec<String>,
    },
    #[error("{role}: answer {answer:?} is not a valid label")]
    InvalidLabel {
        role: String,
        answer: String,
        transcripts: Vec<String>,
    },
    #[error("{role}: {message}")]
    Input { role: String, message: String },
}

impl RoleFailure {
    /// Raw model replies collected before giving up.
    pub fn transcripts(&self) -> &[String] {
        match self {
            RoleFailure::Transport { transcripts, .. }
            | RoleFailure::Unparseable { transcripts, .. }
            | RoleFailure::InvalidLabel { transcripts, .. } => transcripts,
            RoleFailure::Input { .. } => &[],
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("labelled pool has no sample of class {0:?}")]
    MissingClass(String),
    #[error("contrast retrieval needs two different labels, got {0:?} twice")]
    SameLabel(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config I/O {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Vlm(#[from] VlmError),
    #[error(transparent)]
    Role(#[from] RoleFailure),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("template: {0}")]
    Template(String),
    #[error("I/O {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
