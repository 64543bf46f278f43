use thiserror::Error;

/// Errors raised anywhere in the workbench.
///
/// Each variant maps onto one of the CLI exit codes via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input at position {position}: {msg}")]
    Input { position: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error (line {line}): {msg}")]
    Data { line: usize, msg: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// 1 usage/config, 2 data, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => 1,
            Error::Input { .. } | Error::Data { .. } | Error::Json(_) => 2,
            Error::Io(_) => 3,
            Error::Csv(e) => {
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    3
                } else {
                    2
                }
            }
        }
    }
}
