use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("index error in {op}: index {index} out of range for size {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("computation error in {op}: {msg}")]
    Computation { op: &'static str, msg: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("ODE integration diverged at step {step}: non-finite values in stage {stage}")]
    Divergence { step: usize, stage: usize },

    #[error("training diverged at iteration {iteration}: {msg}")]
    Training { iteration: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
