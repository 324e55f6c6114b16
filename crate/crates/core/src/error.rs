use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("degenerate layer `{0}`: pre-trained weights have no nonzero singular value")]
    DegenerateLayer(String),

    #[error("non-finite loss at epoch {epoch}")]
    DivergenceDetected { epoch: usize },

    #[error("evaluation failed at alpha = {alpha}: {detail}")]
    Evaluation { alpha: f64, detail: String },

    #[error("format error: {0}")]
    FormatError(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::SchemaMismatch(_) => "SchemaMismatch",
            Error::EmptyInput(_) => "EmptyInput",
            Error::InvalidStrategy(_) => "InvalidStrategy",
            Error::DegenerateLayer(_) => "DegenerateLayer",
            Error::DivergenceDetected { .. } => "DivergenceDetected",
            Error::Evaluation { .. } => "EvaluationFailed",
            Error::FormatError(_) => "FormatError",
            Error::CorruptFile(_) => "CorruptFile",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
