use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("SE(3) logarithm is ill-conditioned: rotation angle {angle} rad is within 1e-9 of pi")]
    IllConditionedLog { angle: f64 },

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid quaternion: {0}")]
    InvalidQuaternion(String),

    #[error("timestamp {t} ns is outside the spline domain [{start}, {end}) ns")]
    OutOfDomain { t: i64, start: i64, end: i64 },

    #[error("time {t} s is outside the trajectory duration [0, {duration}] s")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("timestamps are not strictly increasing at index {index}")]
    NonMonotonic { index: usize },

    #[error("odometry does not cover [{start}, {end}] ns")]
    CoverageGap { start: i64, end: i64 },

    #[error("no correspondences within {max_dist} m at the initial alignment")]
    NoOverlap { max_dist: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("invalid pose graph: {0}")]
    InvalidGraph(String),

    #[error("pose graph is disconnected: node {node} is unreachable from a fixed node")]
    DisconnectedGraph { node: usize },

    #[error("pose graph has no fixed node")]
    NoFixedNode,

    #[error("information matrix of edge {from}->{to} is not positive definite")]
    NotPositiveDefinite { from: usize, to: usize },

    #[error("sequence '{sequence}' has no cross-sequence edge to the other sequences")]
    DisconnectedMerge { sequence: String },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("no active observations")]
    EmptyObservations,

    #[error("invalid outlier schedule: {0}")]
    InvalidSchedule(String),

    #[error("at least 4 matches are required, got {got}")]
    InsufficientMatches { got: usize },

    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{}:{line}: unknown {kind} id '{id}'", path.display())]
    DanglingId {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        id: String,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("unknown configuration key '{key}'")]
    UnknownConfigKey { key: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::DanglingId { .. }
                | Error::MissingFile(_)
                | Error::InvalidDataset(_)
                | Error::Io(_)
                | Error::InvalidQuaternion(_)
                | Error::InvalidIntrinsics(_)
        )
    }

    /// True for errors caused by bad configuration or command usage.
    pub fn is_usage_error(&self) -> bool {
        matches!(self, Error::UnknownConfigKey { .. } | Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
