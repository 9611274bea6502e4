use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("odd spatial extent {height}x{width}; 2x2 max pooling needs even extents")]
    OddSpatialExtent { height: usize, width: usize },
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("fine label {fine:?} appears under both {first:?} and {second:?}")]
    ConflictingParent {
        fine: String,
        first: String,
        second: String,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("inconsistent labels: {0}")]
    InconsistentLabels(String),
    #[error("loss ratio components must be positive, got {0}:{1}")]
    NonPositiveRatio(f64, f64),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteValue(_) | Error::NonFiniteLoss { .. })
    }
}
