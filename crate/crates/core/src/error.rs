use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate triangle (face {face:?}, area {area:e})")]
    DegenerateTriangle { face: Option<u32>, area: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("too few gaussians: need at least {needed}, have {available}")]
    TooFewGaussians { needed: usize, available: usize },

    #[error("backward called without a paired forward pass")]
    MissingForwardRecord,

    #[error("no visible body gaussian")]
    NoVisibleBody,

    #[error("too few frames: need at least {needed}, have {available}")]
    TooFewFrames { needed: usize, available: usize },

    #[error("invalid category {0}")]
    InvalidCategory(usize),

    #[error("category {0} has no gaussians")]
    EmptyGroup(usize),

    #[error("mesh topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("mesh hash mismatch: file is bound to {file}, mesh is {mesh}")]
    MeshHashMismatch { file: String, mesh: String },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("mask label {label} out of range at pixel ({x}, {y})")]
    LabelOutOfRange { label: u32, x: usize, y: usize },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateTriangle { .. } => "DegenerateTriangle",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::TooFewGaussians { .. } => "TooFewGaussians",
            Error::MissingForwardRecord => "MissingForwardRecord",
            Error::NoVisibleBody => "NoVisibleBody",
            Error::TooFewFrames { .. } => "TooFewFrames",
            Error::InvalidCategory(_) => "InvalidCategory",
            Error::EmptyGroup(_) => "EmptyGroup",
            Error::TopologyMismatch(_) => "TopologyMismatch",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::MeshHashMismatch { .. } => "MeshHashMismatch",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::InvalidMesh(_) => "InvalidMesh",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Io { .. } => "Io",
            Error::Parse { .. } => "Parse",
        }
    }

    /// True for failures that indicate a broken internal contract rather
    /// than bad user input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::MissingForwardRecord | Error::ShapeMismatch(_))
    }
}
