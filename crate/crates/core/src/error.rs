use std::path::PathBuf;

/// Errors raised while reading or writing RTEN tensor containers.
///
/// Each malformation has its own variant so callers can map them to distinct
/// exit codes.
#[derive(Debug, thiserror::Error)]
pub enum RtenError {
    #[error("bad magic: expected \"RTEN\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported RTEN version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated RTEN payload while reading {context}")]
    Truncated { context: String },
    #[error("duplicate record name {0:?}")]
    DuplicateName(String),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("record name is not valid UTF-8")]
    InvalidName,
    #[error("record {name:?}: payload length {len} does not match dims {dims:?}")]
    PayloadMismatch { name: String, len: usize, dims: Vec<usize> },
    #[error("record {0:?} is too large for the container format")]
    TooLarge(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RtenError {
    /// Stable numeric code for machine-readable error reports.
    pub fn code(&self) -> u8 {
        match self {
            RtenError::BadMagic { .. } => 1,
            RtenError::UnsupportedVersion(_) => 2,
            RtenError::Truncated { .. } => 3,
            RtenError::DuplicateName(_) => 4,
            RtenError::UnknownDtype(_) => 5,
            RtenError::InvalidName => 6,
            RtenError::PayloadMismatch { .. } => 7,
            RtenError::TooLarge(_) => 8,
            RtenError::TrailingBytes(_) => 9,
            RtenError::Io(_) => 10,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("graph is empty")]
    EmptyGraph,

    #[error("batch of size {0} is too small; batch statistics need at least 2 examples")]
    BatchTooSmall(usize),
    #[error("adaptive batch-norm mode requested before adapt() was called")]
    NotAdapted,
    #[error("frozen mode requires running statistics from training")]
    MissingRunningStats,
    #[error("momentum {0} is outside [0, 1]")]
    InvalidMomentum(f64),
    #[error("network has no batch-norm layers to adapt")]
    NoBatchNorm,
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected an image of shape [C, H, W], got {0:?}")]
    NotAnImage(Vec<usize>),

    #[error("empty model ensemble")]
    EmptyEnsemble,
    #[error("attack diverged at step {step}: {source}")]
    AttackDiverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("probability {0} is outside the open interval (0, 1)")]
    InvalidProbability(f64),
    #[error("successes {successes} exceed trials {trials}")]
    InvalidCounts { successes: u64, trials: u64 },

    #[error("unknown corruption {0:?}")]
    UnknownCorruption(String),
    #[error("severity {0} is outside 1..=5")]
    InvalidSeverity(u8),
    #[error("error tables differ in coverage: {0}")]
    CoverageMismatch(String),
    #[error("reference errors for {0:?} give a zero denominator")]
    DegenerateReference(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Rten(#[from] RtenError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
