use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("line {line}: invalid or missing field `{field}`")]
    Schema { line: usize, field: String },
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("invalid transcript segment {index}: {reason}")]
    InvalidSegment { index: usize, reason: String },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty text")]
    EmptyText,
    #[error("empty list")]
    EmptyList,
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("ragged retrieval: query {query} has {got} entries, expected {expected}")]
    RaggedRetrieval {
        query: usize,
        got: usize,
        expected: usize,
    },
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("video `{0}` is not silent")]
    NonSilentVideo(String),
    #[error("video `{0}` is not narrative")]
    NonNarrativeVideo(String),
    #[error("clip `{0}` has no narration")]
    SilentClipInBatch(String),
    #[error("duplicate memory entry `{0}`")]
    DuplicateEntry(String),
    #[error("unsupported format version: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dimension mismatch: found {found}, expected {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no template for label `{0}`")]
    MissingTemplate(String),
    #[error("class {0} has no prompts")]
    NoPrompts(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("class {0} has no videos after sampling")]
    ClassMissingInSample(usize),
    #[error("frame `{reference}`: {reason}")]
    Frame { reference: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::Schema { .. } => "SchemaError",
            Error::Integrity(_) => "IntegrityError",
            Error::InvalidSegment { .. } => "InvalidSegment",
            Error::EmptyInput => "EmptyInput",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::EmptyText => "EmptyText",
            Error::EmptyList => "EmptyList",
            Error::BatchMismatch(_) => "BatchMismatch",
            Error::RaggedRetrieval { .. } => "RaggedRetrieval",
            Error::EmptyBank => "EmptyBank",
            Error::NonSilentVideo(_) => "NonSilentVideo",
            Error::NonNarrativeVideo(_) => "NonNarrativeVideo",
            Error::SilentClipInBatch(_) => "SilentClipInBatch",
            Error::DuplicateEntry(_) => "DuplicateEntry",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::Format(_) => "SchemaError",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::MissingTemplate(_) => "MissingTemplate",
            Error::NoPrompts(_) => "NoPrompts",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::ClassMissingInSample(_) => "ClassMissingInSample",
            Error::Frame { .. } => "FrameError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Yaml(_) => "ConfigParseError",
        }
    }
}
