use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image dimensions {width}x{height} are not divisible by {divisor}")]
    Dimensions {
        width: usize,
        height: usize,
        divisor: usize,
    },
    #[error("mismatched input: {0}")]
    Mismatch(String),
    #[error("empty IMU batch")]
    EmptyImuBatch,
    #[error("IMU timestamps not strictly increasing at sample {index} (t = {timestamp})")]
    NonMonotonicImu { index: usize, timestamp: f64 },
    #[error("IMU data does not cover [{start}, {end}]")]
    ImuCoverage { start: f64, end: f64 },
    #[error("singular IMU covariance (degenerate integration interval)")]
    SingularImuCovariance,
    #[error("marginalized block is singular: previous state is unconstrained")]
    SingularMarginal,
    #[error("tracking failed: {0}")]
    TrackingFailure(String),
    #[error("at least {needed} poses required, got {got}")]
    TooFewPoses { needed: usize, got: usize },
    #[error("insufficient trajectory overlap: {matched} associated pairs (need 3)")]
    InsufficientOverlap { matched: usize },
    #[error("empty map")]
    EmptyMap,
    #[error("deformation graph needs at least one constraint")]
    NoConstraints,
    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
