//! Error type shared by every module of the benchmark.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = BenchError> = std::result::Result<T, E>;

/// Every failure the benchmark can surface.
///
/// Each variant maps onto a stable machine-readable code (see [`BenchError::code`])
/// which the CLI prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cumulative forget demand {demand} exceeds {available} training examples")]
    Infeasible { demand: usize, available: usize },
    #[error("inconsistent sizes: {0}")]
    BadSizes(String),
    #[error("index {index} out of range (length {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("no object with id {0}")]
    NotFound(String),
    #[error("content hash mismatch for {id}: stored blob hashes to {actual}")]
    HashMismatch { id: String, actual: String },
    #[error("empty data: {0}")]
    EmptyData(&'static str),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("unknown unlearning algorithm {0:?}")]
    UnknownAlgo(String),
    #[error("bad hyperparameters: {0}")]
    BadHyperparams(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty rewind trajectory")]
    EmptyTrajectory,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} outside [0, {classes})")]
    BadLabel { label: usize, classes: usize },
    #[error("too few shadow models: {0}")]
    TooFewShadows(String),
    #[error("non-finite input: {0}")]
    NanInput(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("misaligned query lists")]
    MisalignedQueries,
    #[error("ROC needs both classes present")]
    OneClass,
    #[error("delta must lie in [0, 1), got {0}")]
    BadDelta(f64),
    #[error("example {0} has no trials")]
    EmptyTrials(usize),
    #[error("plan has {available} iterations, {requested} requested")]
    PlanExhausted { requested: usize, available: usize },
    #[error("empty hyperparameter range for {0}")]
    EmptyRange(String),
    #[error("all {0} tuning trials failed")]
    AllTrialsFailed(usize),
    #[error("attack results cover different query sets")]
    QueryMismatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl BenchError {
    /// Stable upper-case code for machine-readable error output.
    pub fn code(&self) -> &'static str {
        match self {
            BenchError::Infeasible { .. } => "INFEASIBLE",
            BenchError::BadSizes(_) => "BAD_SIZES",
            BenchError::OutOfRange { .. } => "OUT_OF_RANGE",
            BenchError::NotFound(_) => "NOT_FOUND",
            BenchError::HashMismatch { .. } => "HASH_MISMATCH",
            BenchError::EmptyData(_) => "EMPTY_DATA",
            BenchError::Diverged(_) => "DIVERGED",
            BenchError::UnknownAlgo(_) => "UNKNOWN_ALGO",
            BenchError::BadHyperparams(_) => "BAD_HYPERPARAMS",
            BenchError::LengthMismatch { .. } => "LENGTH_MISMATCH",
            BenchError::EmptyTrajectory => "EMPTY_TRAJECTORY",
            BenchError::ShapeMismatch(_) => "SHAPE_MISMATCH",
            BenchError::BadLabel { .. } => "BAD_LABEL",
            BenchError::TooFewShadows(_) => "TOO_FEW_SHADOWS",
            BenchError::NanInput(_) => "NAN_INPUT",
            BenchError::EmptyInput(_) => "EMPTY_INPUT",
            BenchError::MisalignedQueries => "MISALIGNED_QUERIES",
            BenchError::OneClass => "ONE_CLASS",
            BenchError::BadDelta(_) => "BAD_DELTA",
            BenchError::EmptyTrials(_) => "EMPTY_TRIALS",
            BenchError::PlanExhausted { .. } => "PLAN_EXHAUSTED",
            BenchError::EmptyRange(_) => "EMPTY_RANGE",
            BenchError::AllTrialsFailed(_) => "ALL_TRIALS_FAILED",
            BenchError::QueryMismatch => "QUERY_MISMATCH",
            BenchError::Config(_) => "BAD_CONFIG",
            BenchError::Format { .. } => "BAD_FORMAT",
            BenchError::Io { .. } => "IO",
            BenchError::Json { .. } => "JSON",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        BenchError::Json {
            path: path.into(),
            source,
        }
    }
}
