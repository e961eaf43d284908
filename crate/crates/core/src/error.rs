use std::path::PathBuf;

use crate::volio::VolumeKind;

/// Every failure the pipeline can report.
///
/// Variants map one-to-one onto the stable status codes exposed through the
/// C ABI, see [`Error::code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unsupported NRRD header field: {0}")]
    UnsupportedHeaderField(String),
    #[error("malformed NRRD header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSizeMismatch { expected: usize, found: usize },
    #[error("uint8 volume contains values outside {{0, 1}}")]
    NonBinaryMaskValues,
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wrong volume kind: expected {expected:?}, found {found:?}")]
    WrongKind { expected: VolumeKind, found: VolumeKind },
    #[error("unknown orientation code {0:?}")]
    UnknownOrientationCode(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("degenerate output: {0}")]
    DegenerateOutput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("wrong input shape: {0}")]
    WrongInputShape(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("stratum {0:?} has no cases")]
    EmptyStratum(String),
    #[error("group {group} has {available} cases but {requested} were requested")]
    InsufficientGroup {
        group: String,
        available: usize,
        requested: usize,
    },
    #[error("class {0} has no records")]
    MissingClass(u8),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("k = {0} is outside the embedded studentized-range table (2..=10)")]
    KOutOfTableRange(usize),
    #[error("layer {0:?} not found")]
    LayerNotFound(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable numeric code, never 0 (0 means success across the C ABI).
    pub fn code(&self) -> i32 {
        match self {
            Error::UnsupportedHeaderField(_) => 1,
            Error::MalformedHeader(_) => 2,
            Error::PayloadSizeMismatch { .. } => 3,
            Error::NonBinaryMaskValues => 4,
            Error::Io { .. } => 5,
            Error::WrongKind { .. } => 6,
            Error::UnknownOrientationCode(_) => 7,
            Error::InvalidVolume(_) => 8,
            Error::DegenerateOutput(_) => 9,
            Error::InvalidConfig(_) => 10,
            Error::ShapeMismatch(_) => 11,
            Error::NonScalarLoss(_) => 12,
            Error::WrongInputShape(_) => 13,
            Error::GeometryMismatch(_) => 14,
            Error::EmptyStratum(_) => 15,
            Error::InsufficientGroup { .. } => 16,
            Error::MissingClass(_) => 17,
            Error::DegenerateInput(_) => 18,
            Error::KOutOfTableRange(_) => 19,
            Error::LayerNotFound(_) => 20,
            Error::CheckpointMismatch(_) => 21,
            Error::Json(_) => 22,
            Error::Csv(_) => 23,
        }
    }

    /// Config-class failures map to CLI exit code 2, everything else to 1.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }
}
