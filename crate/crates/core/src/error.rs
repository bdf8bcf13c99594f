use std::path::PathBuf;

use crate::net::{HeadId, UnitId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: expected {expected:?}, got {actual:?}")]
    Dimension {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} implies {expected} elements, data has {actual}")]
    TensorShape {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("head `{0}` not found")]
    HeadNotFound(HeadId),

    #[error("forward trace is stale: recorded at parameter version {trace}, network is at {network}")]
    TraceInvalid { trace: u64, network: u64 },

    #[error("invalid unit {0}: units live on dense/conv layers outside the head group")]
    InvalidUnit(UnitId),

    #[error("undo record was already restored")]
    AlreadyRestored,

    #[error("freeze state has no multiplier for unit {0}")]
    IncompleteFreezeState(UnitId),

    #[error("multiplier of unit {unit} cannot rise from {current} to {requested}")]
    Monotonicity {
        unit: UnitId,
        current: f64,
        requested: f64,
    },

    #[error("degenerate denominator at layer {layer}, output {index} (sample {sample})")]
    DegenerateDenominator {
        layer: usize,
        sample: usize,
        index: usize,
    },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("reference set is empty")]
    EmptyReference,

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("relevance report does not match freeze state: {0}")]
    ReportMismatch(String),

    #[error("format error in {path}: {message} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset missing: {0}")]
    DatasetMissing(String),

    #[error("evaluation failed: {0}")]
    Eval(String),

    #[error("run {id} failed: {source}")]
    Run {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
