use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions {height}x{width}")]
    InvalidDimensions { height: usize, width: usize },

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("value {value} at index {index} lies outside [0, 1]")]
    OutOfUnitInterval { index: usize, value: f64 },

    #[error("label value {value} at index {index} is not 0 or 1")]
    NonBinaryLabel { index: usize, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("declared dimensions {height}x{width} overflow the addressable size")]
    DimensionOverflow { height: u64, width: u64 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("non-finite payload value at index {index}")]
    NonFinitePayload { index: usize },

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),

    #[error("need at least 3 masked points for a plane fit, found {found}")]
    TooFewPoints { found: usize },

    #[error("masked points are collinear (singular values {singular_values:?})")]
    RankDeficient { singular_values: [f64; 3] },

    #[error("predicted depth is constant; scale/shift alignment is singular")]
    SingularAlignment,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: sem={sem} geo={geo} distill={distill}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sem: f64,
        geo: f64,
        distill: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("cannot access {path}")]
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

    /// Whether the error came from reading or writing a file, as opposed to
    /// bad content or bad parameters.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
