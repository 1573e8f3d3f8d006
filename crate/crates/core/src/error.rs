use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty pooling region")]
    EmptyRegion,
    #[error("degenerate vector")]
    DegenerateVector,
    #[error("non-unit input vector (norm {norm})")]
    NonUnit { norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("odd row count ({0})")]
    OddRowCount(usize),
    #[error("stale forward cache")]
    StaleCache,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("distance matrix is not symmetric with zero diagonal and finite entries")]
    InvalidDistanceMatrix,
    #[error("no clusters")]
    NoClusters,
    #[error("no clusters this epoch")]
    NoClustersThisEpoch,
    #[error("memory frozen")]
    MemoryFrozen,
    #[error("cluster id {id} out of range (C = {num_clusters})")]
    ClusterOutOfRange { id: usize, num_clusters: usize },
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("clustering collapsed: no clusters for {0} consecutive epochs")]
    ClusteringCollapsed(usize),
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("truncated record: {0}")]
    Truncated(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
