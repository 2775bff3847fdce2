use std::path::PathBuf;

/// Unified error type for the whole engine.
///
/// Variants are grouped so the CLI can map them onto exit codes:
/// validation problems (bad config, bad shapes, bad data) exit 1,
/// numerical failures (NaN, failed gradient check) exit 2, I/O exits 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument for {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("softmax input has a fully masked row (row {row})")]
    FullyMaskedRow { row: usize },

    #[error("attention input is fully masked")]
    FullyMaskedInput,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite loss on clip {clip_id}")]
    NonFiniteLoss { clip_id: String },

    #[error("gradient check failed: worst relative error {worst:.3e} exceeds {tolerance:.3e} ({context})")]
    GradCheckFailed {
        context: String,
        worst: f64,
        tolerance: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint was produced with a different configuration (use --allow-mismatch to override)")]
    ConfigHashMismatch,

    #[error("refusing to write into non-empty directory {0} (use --force)")]
    NonEmptyOutputDir(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code category: 1 validation, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. }
            | Error::NonFiniteLoss { .. }
            | Error::GradCheckFailed { .. }
            | Error::FullyMaskedRow { .. }
            | Error::FullyMaskedInput => 2,
            Error::Io { .. } | Error::Json { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
