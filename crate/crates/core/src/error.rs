use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature slot assignments differ")]
    FeatureSlotMismatch,
    #[error("no free feature slot (capacity {0})")]
    NoFreeSlot(usize),
    #[error("unknown feature id {0}")]
    UnknownFeature(u64),
    #[error("feature id {0} already active")]
    DuplicateFeature(u64),
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("empty IMU window")]
    EmptyImuWindow,
    #[error("IMU timestamps not strictly increasing at t = {0}")]
    NonMonotoneImu(f64),
    #[error("invalid time span [{0}, {1}]")]
    InvalidTimeSpan(f64, f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),
    #[error("no associated pose pairs within {0} s")]
    NoAssociation(f64),
    #[error("trajectory length {length} m is shorter than the segment length {delta} m")]
    TrajectoryTooShort { length: f64, delta: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {kind} record at t = {t} is older than the previous {kind} record")]
    OutOfOrder { line: usize, kind: &'static str, t: f64 },
    #[error("measurement at t = {t} arrived after the filter advanced to t = {filter_t}")]
    StaleMeasurement { t: f64, filter_t: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
