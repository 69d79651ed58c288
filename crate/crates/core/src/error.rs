use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value became NaN or infinite, or an iterative search failed.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// An invalid model, training or t-SNE configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset layout or image decoding problems.
    #[error("data error at {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    /// Malformed manifest, checkpoint or cache file.
    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { context: context.into(), detail: detail.into() }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data { path: path.into(), detail: detail.into() }
    }

    /// Prefix the context of a numeric error, leaving other kinds untouched.
    pub fn in_context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric { context, detail } => {
                Error::Numeric { context: format!("{ctx}: {context}"), detail }
            }
            other => other,
        }
    }
}
