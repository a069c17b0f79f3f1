use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("column `{0}` has too few observed values to interpolate")]
    UnfillableColumn(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("split too small: {0}")]
    SplitTooSmall(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("column `{0}` is constant over the fitting segment; cannot scale")]
    DegenerateScale(String),

    #[error("rolling window {0} is too short for a standard deviation")]
    DegenerateWindow(usize),

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("graph usage error: {0}")]
    Usage(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("feature fingerprint mismatch: model expects {expected}, dataset gives {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("impact undefined: baseline prediction at step {step} is {value:e}")]
    UndefinedImpact { step: usize, value: f64 },

    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("model file checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("corrupt model file: {0}")]
    Corrupt(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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
