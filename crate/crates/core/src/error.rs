use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter `{field}`: {detail}")]
    Parameter { field: String, detail: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parameter {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than
    /// a failure during execution.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Parameter { .. } | Error::Config(_))
    }
}
