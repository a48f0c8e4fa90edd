//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("grid too large for dense operation: {nodes} nodes > limit {limit}")]
    GridTooLarge { nodes: usize, limit: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("decomposition cut not aligned with grid nodes: {0}")]
    MisalignedCut(String),
    #[error("zero-width overlap between subdomains {0} and {1}")]
    ZeroWidthOverlap(usize, usize),
    #[error("decomposition leaves grid region uncovered near node ({0}, {1})")]
    UncoveredRegion(usize, usize),
    #[error("subdomains do not overlap")]
    NonOverlapping,
    #[error("unsupported decomposition: {0}")]
    UnsupportedDecomposition(String),
    #[error("sensor off grid: ({0}, {1})")]
    SensorOffGrid(f64, f64),
    #[error("parameter {name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("missing interface data for neighbor {0}")]
    MissingInterfaceData(usize),
    #[error("boundary specification has no Dirichlet segment; system is singular")]
    NoDirichlet,
    #[error("linear solver failed: {0}")]
    SolverFailure(String),
    #[error("eigensolver failed: {0}")]
    EigenFailure(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("chain aborted at step {step}: {source}")]
    ChainAborted {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("zero-norm reference field")]
    ZeroNormTruth,
    #[error("bad file format: {0}")]
    BadFormat(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
