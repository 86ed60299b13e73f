use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value in component `{component}` ({context})")]
    NonFinite { component: String, context: String },

    #[error("integration blew up at t = {time}")]
    BlowUp { time: f64 },

    #[error("unknown system `{name}`; registry: {registry}")]
    UnknownSystem { name: String, registry: String },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::UnknownSystem { .. }
            | Error::InvalidGrid(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Mismatch(_) | Error::Dimension { .. } => 3,
            Error::NonFinite { .. }
            | Error::BlowUp { .. }
            | Error::Numerical(_)
            | Error::Shape { .. }
            | Error::Graph(_) => 4,
        }
    }
}
