use std::path::PathBuf;

/// Errors raised across the forecasting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty axis in {0}")]
    EmptyAxis(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{key}`: {detail}")]
    InvalidValue { key: String, detail: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("parse error at row {row}, column {col}: non-numeric cell `{cell}`")]
    NonNumeric { row: usize, col: usize, cell: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("no variates")]
    EmptyVariates,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient check failed for `{param}`: {detail}")]
    GradCheck { param: String, detail: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("index {index} out of range (valid: 0..{len})")]
    OutOfRange { index: usize, len: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png encoding failed: {0}")]
    Png(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used for CLI error prefixes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::EmptyAxis(_) | Error::DimMismatch(_) => "shape",
            Error::Config(_) | Error::UnknownKey(_) | Error::InvalidValue { .. } => "config",
            Error::Parse { .. } | Error::NonNumeric { .. } => "parse",
            Error::EmptyInput(_) | Error::InsufficientData(_) => "data",
            Error::EmptyBatch | Error::EmptyVariates => "input",
            Error::NonFinite(_) | Error::Diverged { .. } => "numeric",
            Error::GradCheck { .. } => "gradcheck",
            Error::OutOfRange { .. } => "range",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Png(_) => "png",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
