//! Error type shared by every stage of the toolkit.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AtlasError>;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a NIfTI-1 file (bad magic): {0}")]
    BadMagic(PathBuf),

    #[error("unsupported NIfTI datatype code {0} (supported: 2, 4, 8, 16, 64)")]
    UnsupportedDatatype(i16),

    #[error("only 3-D volumes are supported, header has dim[0] = {0}")]
    BadDimensionality(i16),

    #[error("truncated payload: expected {expected} data bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid volume data: {0}")]
    InvalidData(String),

    #[error("label value {0} outside the supported range 0..=13")]
    LabelOutOfRange(f64),

    #[error("geometry mismatch between {context}")]
    GeometryMismatch { context: &'static str },

    #[error("trilinear interpolation is not valid for label maps")]
    LabelInterpolation,

    #[error("{0}")]
    EmptyInput(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("volume too small: {0}")]
    VolumeTooSmall(String),

    #[error("slice score sidecar has {got} entries for {expected} slices")]
    SidecarLengthMismatch { expected: usize, got: usize },

    #[error("too few slices survive the score window: {survived} < {minimum}")]
    TooFewSlices { survived: usize, minimum: usize },

    #[error("score window [{lo}, {hi}] selects no slices")]
    EmptyWindow { lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("bad field file: {0}")]
    BadFieldFile(String),

    #[error("png encode error: {0}")]
    Png(String),

    #[error("{0}")]
    Pipeline(String),
}

impl AtlasError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AtlasError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        AtlasError::Json {
            path: path.into(),
            source,
        }
    }
}
