use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot amplitude-encode input: {0}")]
    Encoding(String),
    #[error("invalid gate: {0}")]
    Gate(String),
    #[error("invalid noise parameter: {0}")]
    Noise(String),
    #[error("invalid circuit spec: {0}")]
    Spec(String),
    #[error("observable is not diagonal in the computational basis; sampled mode unsupported")]
    UnsupportedObservable,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    Batch,
    #[error("finite-difference oracle requires noiseless analytic mode")]
    OracleMode,
    #[error("cannot partition {d} parameters over {m} nodes")]
    Partition { d: usize, m: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("barrier timed out at iteration {iteration}: missing nodes {missing:?}")]
    BarrierTimeout { iteration: u64, missing: Vec<usize> },
    #[error("non-finite value in {0}")]
    Numerics(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("communication ledger error: {0}")]
    Ledger(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("differ target {target} infeasible for M={m} (max {max:.6})")]
    InfeasibleTarget { target: f64, m: usize, max: f64 },
    #[error("speed-up undefined: {0}")]
    SpeedupUndefined(String),
    #[error("bound undefined: p_max must be < 1 and T >= 1")]
    BoundUndefined,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
