use std::fmt;

/// Errors produced by kernels, the autodiff engine, builders and loaders.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible. `context` names the op or layer path.
    Dimension { context: String, detail: String },
    /// Invalid configuration (bad reduction ratio, stride, learning rate, ...).
    Config(String),
    /// Invalid runtime input (out-of-range label, empty metric input, ...).
    Input(String),
    /// Malformed binary data; `offset` is the byte position of the problem.
    Format { offset: usize, detail: String },
    /// Operation issued in the wrong engine state (e.g. backward on an empty tape).
    State(String),
    /// Operation not supported for the given strategy or kind.
    Unsupported(String),
    Io(String),
    /// Non-finite loss during training.
    Diverged { epoch: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Prefix the context of a dimension error with a layer path.
    pub fn at(self, path: &str) -> Self {
        match self {
            Error::Dimension { context, detail } => Error::Dimension {
                context: format!("{path}: {context}"),
                detail,
            },
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { context, detail } => {
                write!(f, "dimension error in {context}: {detail}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Format { offset, detail } => {
                write!(f, "format error at byte offset {offset}: {detail}")
            }
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Unsupported(msg) => write!(f, "unsupported operation: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::Diverged { epoch, detail } => write!(f, "numeric divergence at epoch {epoch}: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(value: std::io::Error) -> Self {
        Error::Io(value.to_string())
    }
}
