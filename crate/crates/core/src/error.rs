use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value at row {row}")]
    NonFiniteValue { row: usize },

    #[error("label {label} at row {row} out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: u32,
        num_classes: u32,
    },

    #[error("invalid feature set: {0}")]
    InvalidFeatureSet(String),

    #[error("extractor mismatch: {0} vs {1}")]
    ExtractorMismatch(String, String),

    #[error("mean vector is zero, cosine distance undefined")]
    DegenerateMean,

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("no class present in both source and confident set")]
    NoSharedClasses,

    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty manifest: {0}")]
    EmptyManifest(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("non-finite gradient{context}")]
    NonFiniteGradient { context: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("incomplete report: {0}")]
    IncompleteReport(String),

    #[error("feature set has no labels")]
    Unlabeled,

    #[error("extractor {extractor}: {source}")]
    Extractor {
        extractor: String,
        #[source]
        source: Box<Error>,
    },

    #[error("tuning cell {cell}: {source}")]
    TuneCell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for configuration and validation failures (CLI exit code 2);
    /// everything else is a runtime or IO failure (exit code 1).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io(_) => false,
            Error::NonFiniteGradient { .. } => false,
            Error::Extractor { source, .. }
            | Error::TuneCell { source, .. }
            | Error::File { source, .. } => source.is_validation(),
            Error::Json(e) => !e.is_io(),
            _ => true,
        }
    }

    pub(crate) fn with_path(self, path: impl Into<PathBuf>) -> Error {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
