use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the makeup pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter `{name}` out of range: {value} not in {range}")]
    ParamOutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("normalized vector component {index} = {value} outside [0, 1]")]
    NormalizedOutOfRange { index: usize, value: f64 },

    #[error("no presets")]
    NoPresets,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("no region: the target has no polygons")]
    NoRegion,

    #[error("dimension mismatch: expected {expected_width}x{expected_height}, got {width}x{height}")]
    DimensionMismatch {
        expected_width: usize,
        expected_height: usize,
        width: usize,
        height: usize,
    },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image too small for this metric: {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported model version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_frame(self, index: usize) -> Self {
        Error::Frame {
            index,
            source: Box::new(self),
        }
    }
}
