use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // geometry
    #[error("ray does not intersect the bounding sphere")]
    NoIntersection,
    #[error("ray origin lies strictly inside the bounding sphere")]
    OriginInside,
    #[error("ray entry and exit points coincide")]
    DegenerateRay,
    #[error("computed ray-surface distance {0} is negative")]
    NegativeResult(f64),
    #[error("point lies behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("point lies outside the bounding sphere")]
    PointOutsideSphere,
    #[error("normal derivation degenerate: cross product norm {0:e}")]
    DegenerateGradient(f64),

    // dataset
    #[error("no valid samples survived conversion")]
    EmptyStore,
    #[error("at least two scans are required, got {0}")]
    InsufficientScans(usize),
    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated")]
    TruncatedFile,

    // nn
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient encountered")]
    NonFiniteGradient,
    #[error("value {0} outside the loss domain")]
    DomainError(f64),

    // training
    #[error("training data contains a single label class")]
    SingleClassData,
    #[error("a trained visibility classifier is required when M > 0")]
    MissingClassifier,
    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    // eval
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("empty point set")]
    EmptySet,

    // cli / config
    #[error("invalid config: {0}")]
    Config(String),
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
}
