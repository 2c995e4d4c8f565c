use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no labeled units")]
    NoLabeledUnits,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("degenerate direction: vector norm below {0:e}")]
    DegenerateDirection(f64),

    #[error("label vector has no set bits")]
    EmptyLabel,

    #[error("class index {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },

    #[error("point ({x}, {y}) outside {width}x{height} image")]
    PointOutsideImage {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data in {path}: {message}")]
    Invalid { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
