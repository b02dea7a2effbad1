use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {0} has zero norm and cannot be normalized")]
    ZeroRow(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("bank has no labels")]
    MissingLabels,

    #[error("class {class} has {available} rows, {requested} shots requested")]
    InsufficientShots {
        class: String,
        available: usize,
        requested: usize,
    },

    #[error("class {class} has {available} candidates, {requested} requested")]
    InsufficientCandidates {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("degenerate logits: zero variance across classes in sample {sample}")]
    DegenerateLogits { sample: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
