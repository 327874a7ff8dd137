use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("point {index} lies behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("regression batch has no true locations")]
    EmptyBatch,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("need at least {required} correspondences, got {actual}")]
    InsufficientPoints { required: usize, actual: usize },

    #[error("singular configuration: {0}")]
    SingularConfiguration(String),

    #[error("no model reached {min_inliers} inliers")]
    NoConsensus { min_inliers: usize },

    #[error("invalid box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),

    #[error("both visibility masks are empty")]
    EmptyUnion,

    #[error("schema error in row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("missing annotation: {0}")]
    MissingAnnotation(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    /// Attach the offending file path to an error.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input (files, annotations, arguments)
    /// as opposed to numerical failures inside the pipeline.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::UnsupportedFormat(_)
            | Error::Schema { .. }
            | Error::MissingAnnotation(_)
            | Error::Io(_)
            | Error::Json(_) => true,
            Error::File { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}
